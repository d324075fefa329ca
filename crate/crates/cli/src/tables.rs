//! Model tables with the published reference values alongside.

use std::collections::BTreeMap;
use std::fmt::Write;

use sentinel_core::alerts::{
    alert_thresholds, attacker_escape_probability, prob_at_most_n_blocks, type2_thresholds, AlertLevel, AttackerModel,
    BlockTimingModel, EscapeModel,
};

use crate::CliError;

const ALERT_REFERENCE: &str = include_str!("../data/alerts12mins.csv");
const ATTACK_REFERENCE: &str = include_str!("../data/attack_probs.csv");

pub const REFERENCE_TIMES: [f64; 14] =
    [20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0, 180.0, 240.0, 300.0, 360.0, 480.0, 600.0];
pub const REFERENCE_BLOCKS: [u32; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 12, 18];
pub const REFERENCE_ALPHAS: [f64; 6] = [0.05, 0.08, 0.125, 0.2, 0.3, 0.5];

/// Published cell: value text ("approx1" for ≈1) and colour class.
fn alert_reference() -> BTreeMap<(u32, u32), (String, AlertLevel)> {
    ALERT_REFERENCE
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let level = match f[3] {
                "green" => AlertLevel::Green,
                "yellow" => AlertLevel::Yellow,
                "orange" => AlertLevel::Orange,
                _ => AlertLevel::Red,
            };
            ((f[0].parse().expect("reference t"), f[1].parse().expect("reference n")), (f[2].to_string(), level))
        })
        .collect()
}

fn attack_reference() -> Vec<(f64, [f64; 3])> {
    ATTACK_REFERENCE
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<f64> = line.split(',').map(|x| x.parse().expect("reference value")).collect();
            (f[0], [f[1], f[2], f[3]])
        })
        .collect()
}

pub fn published_attack_value(alpha: f64, level: AlertLevel) -> Option<f64> {
    let idx = AlertLevel::ALARMS.iter().position(|&l| l == level)?;
    attack_reference().into_iter().find(|(a, _)| (a - alpha).abs() < 1e-12).map(|(_, v)| v[idx])
}

fn two_figures(p: f64) -> String {
    format!("{p:.1e}")
}

fn class_letter(l: AlertLevel) -> char {
    match l {
        AlertLevel::Green => 'G',
        AlertLevel::Yellow => 'Y',
        AlertLevel::Orange => 'O',
        AlertLevel::Red => 'R',
    }
}

/// Whether our value agrees with a published cell at two figures and class.
pub fn cell_agrees(p: f64, published: &str, published_level: AlertLevel) -> bool {
    let value_ok = if published == "approx1" {
        p > 0.995
    } else {
        published.parse::<f64>().ok() == two_figures(p).parse::<f64>().ok()
    };
    value_ok && AlertLevel::from_probability(p) == published_level
}

pub fn alert_probs(times: &[f64], blocks: &[u32], mean: f64, csv: bool) -> String {
    let model = BlockTimingModel::with_mean(mean);
    let reference = (mean == 12.0).then(alert_reference);
    let mut out = String::new();
    if csv {
        out.push_str("t,n,probability,class,published\n");
    } else {
        let _ = writeln!(out, "P(at most n blocks created in t minutes), mean block interval {mean} min");
        let _ = writeln!(out, "classes: G green, Y yellow (<1e-2), O orange (<1e-4), R red (<1e-6)");
        let _ = write!(out, "{:>6}", "t\\n");
        for n in blocks {
            let _ = write!(out, "{n:>10}");
        }
        out.push('\n');
    }
    let (mut compared, mut agreed, mut diffs) = (0, 0, Vec::new());
    for &t in times {
        if !csv {
            let _ = write!(out, "{t:>6}");
        }
        for &n in blocks {
            let p = prob_at_most_n_blocks(n, t, &model);
            let level = AlertLevel::from_probability(p);
            let published = reference.as_ref().and_then(|r| {
                (t.fract() == 0.0).then(|| r.get(&(t as u32, n))).flatten()
            });
            if let Some((text, plevel)) = published {
                compared += 1;
                if cell_agrees(p, text, *plevel) {
                    agreed += 1;
                } else {
                    diffs.push(format!("t={t} n={n}: ours {} {}, published {text} {}", two_figures(p), level, plevel));
                }
            }
            if csv {
                let published_text = published.map(|(s, _)| s.as_str()).unwrap_or("");
                let _ = writeln!(out, "{t},{n},{p:.6e},{level},{published_text}");
            } else {
                let _ = write!(out, "{:>10}", format!("{} {}", two_figures(p), class_letter(level)));
            }
        }
        if !csv {
            out.push('\n');
        }
    }
    if !csv && compared > 0 {
        let _ = writeln!(out, "published table: {agreed} of {compared} cells agree to 2 significant figures and class");
        for d in diffs {
            let _ = writeln!(out, "  differs: {d}");
        }
    }
    out
}

pub fn thresholds(ks: &[u32], confirmations: &[usize], mean: f64, csv: bool) -> String {
    let model = BlockTimingModel::with_mean(mean);
    let mut rows: Vec<(String, [f64; 3], Option<&str>)> = Vec::new();
    for &k in ks {
        let t = alert_thresholds(k, &model);
        let published = match (k, mean == 12.0) {
            (1, true) => Some("55 / 110 / 165"),
            (7, true) => Some("190 / 275 / 350"),
            _ => None,
        };
        rows.push((format!("{k} block{}", if k == 1 { "" } else { "s" }), [t.yellow, t.orange, t.red], published));
    }
    for &c in confirmations {
        let t = type2_thresholds(c, &model);
        let published = (c == 6 && mean == 12.0).then_some("190 / 275 / 350");
        rows.push((format!("type-2, k={c} ({} stamps)", c + 2), [t.yellow, t.orange, t.red], published));
    }
    let mut out = String::new();
    if csv {
        out.push_str("window,yellow,orange,red,published\n");
        for (name, v, published) in rows {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", v[0], v[1], v[2], published.unwrap_or(""));
        }
        return out;
    }
    let _ = writeln!(out, "alert thresholds in minutes, mean block interval {mean} min");
    let _ = writeln!(out, "{:<26}{:>9}{:>9}{:>9}   {}", "window", "yellow", "orange", "red", "published");
    for (name, v, published) in rows {
        let _ = writeln!(out, "{name:<26}{:>9.2}{:>9.2}{:>9.2}   {}", v[0], v[1], v[2], published.unwrap_or("-"));
    }
    if ks.contains(&7) || confirmations.contains(&6) {
        let _ = writeln!(
            out,
            "note: the type-2 monitor measures the last k+2 timestamps plus the time since the newest, an Erlang(k+2) interval"
        );
    }
    out
}

pub fn attack_probs(
    alphas: &[f64],
    levels: &[AlertLevel],
    blocks: u32,
    mean: f64,
    escape: EscapeModel,
    csv: bool,
) -> Result<String, CliError> {
    let model = BlockTimingModel::with_mean(mean);
    let compare = blocks == 7 && mean == 12.0;
    let mut out = String::new();
    if csv {
        out.push_str("alpha,level,probability,published\n");
    } else {
        let model_name = match escape {
            EscapeModel::Tabulated => "tabulated",
            EscapeModel::NominalRate => "nominal-rate",
        };
        let _ = writeln!(out, "probability an alpha-strong attacker builds {blocks} blocks before the alert fires ({model_name} model)");
        let _ = writeln!(out, "{:>7}  {:<7}{:>11}{:>11}{:>8}", "alpha", "level", "ours", "published", "ratio");
    }
    for &alpha in alphas {
        let attacker = AttackerModel::new(alpha).map_err(|e| CliError::Usage(e.to_string()))?;
        for &level in levels {
            let ours = attacker_escape_probability(&attacker, level, blocks, &model, escape);
            let published = compare.then(|| published_attack_value(alpha, level)).flatten();
            if csv {
                let p = published.map(|p| format!("{p:e}")).unwrap_or_default();
                let _ = writeln!(out, "{alpha},{level},{ours:.6e},{p}");
            } else {
                let (p, r) = match published {
                    Some(p) => (format!("{p:.2e}"), format!("{:.2}", ours / p)),
                    None => ("-".into(), "-".into()),
                };
                let _ = writeln!(out, "{alpha:>7.3}  {:<7}{:>11}{p:>11}{r:>8}", level.to_string(), format!("{ours:.2e}"));
            }
        }
    }
    Ok(out)
}
