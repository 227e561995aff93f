use crate::error::{Error, Result};
use crate::par::{chunked_fold, Execution};
use crate::tensor::ParameterSet;

/// Runs `f(k, item, grads)` for every item, summing the returned loss parts
/// and the gradients it accumulates. The chunked summation order is fixed,
/// so sequential and parallel execution agree bitwise.
pub fn accumulate_gradients<T, const N: usize, F>(
    exec: Execution,
    items: &[T],
    chunk: usize,
    zeros: &ParameterSet,
    f: F,
) -> Result<([f64; N], ParameterSet)>
where
    T: Sync,
    F: Fn(usize, &T, &mut ParameterSet) -> Result<[f64; N]> + Sync + Send,
{
    if items.is_empty() {
        return Err(Error::validation("cannot accumulate gradients over an empty batch"));
    }
    chunked_fold(
        exec,
        items,
        chunk,
        || Ok(([0.0; N], zeros.clone())),
        |acc: &mut Result<([f64; N], ParameterSet)>, k, item| {
            let Ok((sums, grads)) = acc else { return };
            match f(k, item, grads) {
                Ok(parts) => sums.iter_mut().zip(parts).for_each(|(s, p)| *s += p),
                Err(e) => *acc = Err(e),
            }
        },
        |a, b| match (a.as_mut(), b) {
            (Ok((sa, ga)), Ok((sb, gb))) => {
                ga.add_assign(&gb);
                sa.iter_mut().zip(sb).for_each(|(x, y)| *x += y);
            }
            (Ok(_), Err(e)) => *a = Err(e),
            _ => {}
        },
    )
    .expect("nonempty batch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sums_parts_and_grads_in_either_mode() {
        let mut zeros = ParameterSet::new();
        zeros.push("w", Tensor::zeros(&[2])).unwrap();
        let items: Vec<f64> = (0..11).map(|i| 0.1 * i as f64).collect();
        let run = |exec| {
            accumulate_gradients(exec, &items, 3, &zeros, |k, x, g| {
                g.data_mut(0)[0] += x;
                g.data_mut(0)[1] += k as f64;
                Ok([*x, 1.0])
            })
            .unwrap()
        };
        let (sa, ga) = run(Execution::Sequential);
        let (sb, gb) = run(Execution::Parallel);
        assert_eq!(sa[1], 11.0);
        assert_eq!(sa[0].to_bits(), sb[0].to_bits());
        assert_eq!(ga, gb);
        assert_eq!(ga.data(0)[1], 55.0);
    }

    #[test]
    fn first_error_wins_and_empty_is_rejected() {
        let mut zeros = ParameterSet::new();
        zeros.push("w", Tensor::zeros(&[1])).unwrap();
        let r = accumulate_gradients(Execution::Sequential, &[1, 2, 3], 2, &zeros, |_, &x, _| {
            if x == 2 {
                Err(Error::validation("bad"))
            } else {
                Ok([1.0])
            }
        });
        assert!(r.is_err());
        let empty: [u8; 0] = [];
        assert!(accumulate_gradients(Execution::Sequential, &empty, 2, &zeros, |_, _, _| Ok([0.0])).is_err());
    }
}
