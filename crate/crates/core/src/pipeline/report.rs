use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::manifest::read_manifests;
use crate::error::{Error, Result};
use crate::evaluate::{delta_table, EvalReport, TSV_HEADER};
use crate::io::{read_json, write_atomic};

pub const REPORTS_DIR: &str = "evaluate/reports";
pub const REPORT_DIR: &str = "report";

fn read_reports(workdir: &Path) -> Result<Vec<EvalReport>> {
    let dir = workdir.join(REPORTS_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

/// Consolidates every evaluation report in `workdir` into
/// `report/summary.tsv` (flat rows for plotting), `report/deltas.tsv`
/// (relative change against `baseline`; negative means lower error) and
/// `report/provenance.tsv`, and returns the combined text.
pub fn report(workdir: &Path, baseline: Option<&str>) -> Result<String> {
    let manifests = read_manifests(workdir)?;
    if manifests.is_empty() {
        return Err(Error::validation(format!("no run manifests under {}", workdir.display())));
    }
    let reports = read_reports(workdir)?;
    let out = workdir.join(REPORT_DIR);

    let mut summary = TSV_HEADER.to_string();
    for r in &reports {
        summary.push_str(&r.to_tsv_rows());
    }
    write_atomic(&out.join("summary.tsv"), summary.as_bytes())?;

    let mut prov = String::from("stage\trun_id\tkind\tpath\thash\n");
    for m in &manifests {
        for (kind, map) in [("input", &m.inputs), ("output", &m.outputs)] {
            for (p, h) in map {
                writeln!(prov, "{}\t{}\t{kind}\t{p}\t{h}", m.stage, m.run_id).unwrap();
            }
        }
    }
    write_atomic(&out.join("provenance.tsv"), prov.as_bytes())?;

    let mut text = String::new();
    writeln!(text, "# metrics").unwrap();
    text.push_str(&summary);
    let base = baseline.and_then(|b| reports.iter().find(|r| r.checkpoint == b));
    if let (Some(b), true) = (base, reports.len() > 1) {
        let others: Vec<&EvalReport> = reports.iter().filter(|r| r.checkpoint != b.checkpoint).collect();
        let deltas = delta_table(b, &others);
        write_atomic(&out.join("deltas.tsv"), deltas.as_bytes())?;
        writeln!(text, "\n# relative change vs {} (negative = lower)", b.checkpoint).unwrap();
        text.push_str(&deltas);
    }
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_json;
    use crate::pipeline::manifest::RunManifest;

    fn manifest(wd: &Path) {
        RunManifest {
            run_id: "r".into(),
            stage: "evaluate".into(),
            inputs: Default::default(),
            config: serde_json::json!(null),
            config_hash: "c".into(),
            seeds: vec![1],
            outputs: Default::default(),
            wall_clock_secs: 0.0,
            steps: 0,
        }
        .write_new(wd)
        .unwrap();
    }

    fn put(wd: &Path, name: &str, ic: f64, sf: f64) {
        let mut r = EvalReport::new(name);
        r.set("ic_error", ic).unwrap();
        r.set("sf_error", sf).unwrap();
        write_json(&wd.join(REPORTS_DIR).join(format!("{name}.json")), &r).unwrap();
    }

    #[test]
    fn needs_a_manifest() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(report(d.path(), None), Err(Error::Validation(_))));
    }

    #[test]
    fn single_run_is_absolute_and_two_runs_get_deltas() {
        let d = tempfile::tempdir().unwrap();
        manifest(d.path());
        put(d.path(), "stage1", 0.2, 0.4);
        let one = report(d.path(), Some("stage1")).unwrap();
        assert!(!one.contains("relative change"));
        assert!(!d.path().join("report/deltas.tsv").exists());
        put(d.path(), "stage2", 0.1, 0.5);
        let two = report(d.path(), Some("stage1")).unwrap();
        assert!(two.contains("stage2\tstage1\tic_error\t0.200000\t0.100000\t-50.00"), "{two}");
        assert!(two.contains("stage2\tstage1\tsf_error\t0.400000\t0.500000\t+25.00"), "{two}");
        assert_eq!(report(d.path(), Some("stage1")).unwrap(), two);
    }
}
