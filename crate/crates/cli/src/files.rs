//! `simulate` and `analyze`: file in, files out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::json;

use sentinel_core::metrics::{analyze as run_analysis, AnalysisSpec, ConnectionTrace, Excision, InactivityCut};
use sentinel_core::sim::{
    detection_histogram, export_trace, run_batch, run_scenario, summarize, ScenarioConfig, ScenarioResult,
};

use crate::{data_err, CliError};

/// Parses TOML, or JSON when the extension says so.
pub fn load_structured<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path.display())(e.to_string()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| data_err(path.display())(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| data_err(path.display())(e.to_string()))
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| data_err(path.display())(e.to_string()))
}

fn minutes(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |m| format!("{m:.2} min"))
}

fn histogram_csv(results: &[ScenarioResult], bin: f64) -> String {
    let mut s = String::from("bin_start_minutes,count\n");
    for (start, n) in detection_histogram(results, bin) {
        let _ = writeln!(s, "{start},{n}");
    }
    s
}

fn run_record(r: &ScenarioResult) -> serde_json::Value {
    json!({
        "seed": r.seed,
        "eclipseStartMinutes": r.eclipse_start_minutes,
        "forkHeight": r.fork_height,
        "honestHeight": r.honest_height,
        "attackerBlocks": r.attacker_blocks,
        "endMinutes": r.end_minutes,
        "reports": r.reports,
    })
}

pub fn simulate(
    scenario: Option<&Path>,
    out: &Path,
    runs: usize,
    threads: usize,
    seed: Option<u64>,
    bin: f64,
) -> Result<String, CliError> {
    if runs == 0 || threads == 0 {
        return Err(CliError::Usage("--runs and --threads must be positive".into()));
    }
    if !(bin > 0.0) {
        return Err(CliError::Usage("--bin must be positive".into()));
    }
    let mut cfg: ScenarioConfig = match scenario {
        Some(p) => load_structured(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Data(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| data_err(out.display())(e.to_string()))?;

    let results = if runs == 1 {
        vec![run_scenario(&cfg).map_err(|e| CliError::Data(e.to_string()))?]
    } else {
        run_batch(&cfg, runs, threads).map_err(|e| CliError::Data(e.to_string()))?
    };
    let mut written: Vec<&str> = Vec::new();
    if runs == 1 {
        let r = &results[0];
        write(out, "events.jsonl", r.events_jsonl())?;
        let mut csv = Vec::new();
        match export_trace(&r.events) {
            Ok(trace) => trace.write_csv(&mut csv).map_err(|e| CliError::Data(e.to_string()))?,
            Err(_) => csv.extend_from_slice(b"time,user,server\n"),
        }
        write(out, "trace.csv", csv)?;
        write(out, "report.json", serde_json::to_string_pretty(&run_record(r)).expect("serializable") + "\n")?;
        written.extend(["events.jsonl", "trace.csv", "report.json"]);
    } else {
        let lines: String = results.iter().map(|r| run_record(r).to_string() + "\n").collect();
        write(out, "reports.jsonl", lines)?;
        written.push("reports.jsonl");
    }
    let summary = summarize(&results);
    write(out, "summary.json", serde_json::to_string_pretty(&summary).expect("serializable") + "\n")?;
    write(out, "detection_histogram.csv", histogram_csv(&results, bin))?;
    written.extend(["summary.json", "detection_histogram.csv"]);

    let mut text = String::new();
    let _ = writeln!(text, "runs {}  eclipsed users {}  detected {}", summary.runs, summary.eclipsed_users, summary.detected);
    let _ = writeln!(
        text,
        "detection time: mean {}  median {}",
        minutes(summary.mean_detection_minutes),
        minutes(summary.median_detection_minutes)
    );
    let _ = writeln!(text, "median first type-1 yellow: {}", minutes(summary.median_type1_yellow_minutes));
    match (summary.escape_rate, summary.escape_standard_error) {
        (Some(p), Some(se)) => {
            let _ = writeln!(text, "escape from yellow: {p:.5} +/- {se:.5} over {} decided", summary.escape_decided);
        }
        _ => text.push_str("escape from yellow: n/a\n"),
    }
    let _ = writeln!(text, "wrote {}", written.join(" "));
    Ok(text)
}

pub struct AnalyzeOptions {
    pub spec: Option<PathBuf>,
    pub servers: Option<Vec<String>>,
    pub t0: Option<i64>,
    pub t_max: Option<i64>,
    pub no_cut: bool,
    pub excision: Option<Excision>,
    pub seed: Option<u64>,
}

pub fn analyze(trace_path: &Path, out: Option<&Path>, opts: &AnalyzeOptions) -> Result<String, CliError> {
    let file = fs::File::open(trace_path).map_err(|e| data_err(trace_path.display())(e.to_string()))?;
    let trace = ConnectionTrace::read_csv(file).map_err(|e| data_err(trace_path.display())(e.to_string()))?;
    let trace = if opts.t0.is_some() || opts.t_max.is_some() {
        let (t0, t_max) = (opts.t0.unwrap_or(trace.t0), opts.t_max.unwrap_or(trace.t_max));
        ConnectionTrace::with_bounds(trace.records().to_vec(), t0, t_max).map_err(|e| CliError::Data(e.to_string()))?
    } else {
        trace
    };
    let mut spec: AnalysisSpec = match &opts.spec {
        Some(p) => load_structured(p)?,
        None => AnalysisSpec::default(),
    };
    if let Some(s) = &opts.servers {
        spec.servers = Some(s.clone());
    }
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    if let Some(ex) = opts.excision {
        spec.cut = Some(InactivityCut { excision: ex, ..spec.cut.unwrap_or_default() });
    }
    if opts.no_cut {
        spec.cut = None;
    }
    let report = run_analysis(&trace, &spec).map_err(|e| CliError::Data(e.to_string()))?;
    let text = report.to_text();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| data_err(dir.display())(e.to_string()))?;
        write(dir, "report.json", serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
        write(dir, "report.txt", &text)?;
    }
    Ok(text)
}
