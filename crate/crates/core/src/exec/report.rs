//! Success-rate versus episode-length scatter and a per-task metrics table.

use std::fmt::Write as _;

use super::SummaryRow;
use crate::sim::TaskId;

pub const FRONTIER_FILE: &str = "frontier.svg";

const W: f64 = 520.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub svg: String,
    pub table: String,
}

pub fn compare_report(rows: &[SummaryRow]) -> Report {
    Report { svg: frontier_svg(rows), table: summary_table(rows) }
}

fn policies(rows: &[SummaryRow]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for r in rows {
        if !out.contains(&r.policy.as_str()) {
            out.push(&r.policy);
        }
    }
    out
}

/// One marker per (policy, task): circles for transport-easy, squares for
/// insert-hard, colored by policy.
pub fn frontier_svg(rows: &[SummaryRow]) -> String {
    let pols = policies(rows);
    let max_steps = rows.iter().map(|r| r.mean_steps).fold(1.0_f64, f64::max);
    let x_max = (max_steps / 20.0).ceil() * 20.0;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |v: f64| LEFT + pw * v / x_max;
    let sy = |v: f64| TOP + ph * (1.0 - v / 100.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let v = 20.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#, LEFT - 4.0, sy(v) + 4.0);
        let xv = x_max * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#, sx(xv), TOP + ph + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">steps</text>"#, LEFT + pw / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">SR(%)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for r in rows {
        let i = pols.iter().position(|p| *p == r.policy).unwrap_or(0);
        let c = COLORS[i % COLORS.len()];
        let (x, y) = (sx(r.mean_steps), sy(r.sr));
        match r.task {
            TaskId::TransportEasy => {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="{c}" fill-opacity="0.8"/>"#);
            }
            TaskId::InsertHard => {
                let _ =
                    writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{c}" fill-opacity="0.8"/>"#, x - 5.0, y - 5.0);
            }
        }
    }
    let lx = W - RIGHT + 12.0;
    for (i, p) in pols.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<circle cx="{lx:.1}" cy="{:.1}" r="5" fill="{c}"/>"#, y - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{p}</text>"#, lx + 10.0);
    }
    let y = TOP + 22.0 + 16.0 * pols.len() as f64;
    let _ = writeln!(s, r#"<text x="{lx:.1}" y="{y:.1}">o easy  [] hard</text>"#);
    s.push_str("</svg>\n");
    s
}

/// Policies as rows; SR, mean steps T and Calls per task as columns.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let cell = |p: &str, t: TaskId| rows.iter().find(|r| r.policy == p && r.task == t);
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} | {:>20} | {:>20}", "", "transport-easy", "insert-hard");
    let _ = writeln!(s, "{:<12} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}", "policy", "SR", "T", "Calls", "SR", "T", "Calls");
    for p in policies(rows) {
        let mut line = format!("{p:<12}");
        for t in TaskId::ALL {
            match cell(p, t) {
                Some(r) => {
                    let _ = write!(line, " | {:>6.1} {:>6.1} {:>6.2}", r.sr, r.mean_steps, r.mean_calls);
                }
                None => {
                    let _ = write!(line, " | {:>6} {:>6} {:>6}", "-", "-", "-");
                }
            }
        }
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s
}
