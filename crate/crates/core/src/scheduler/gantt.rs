use std::fmt::Write;

use super::{EventKind, PipelineSchedule};

const WIDTH: f64 = 1000.0;
const LANE: f64 = 24.0;
const LABEL: f64 = 90.0;
const TOP: f64 = 20.0;

fn color(kind: EventKind) -> &'static str {
    match kind {
        EventKind::F => "#4c78a8",
        EventKind::X => "#9d9d9d",
        EventKind::AF => "#f58518",
        EventKind::SF => "#e45756",
        EventKind::B => "#54a24b",
        EventKind::W => "#b279a2",
        EventKind::Sync => "#eeca3b",
    }
}

/// Self-contained SVG: one lane per resource, one rectangle per event,
/// coloured by event kind. Output depends only on the schedule.
pub fn render_svg(s: &PipelineSchedule) -> String {
    let lanes = s.resources();
    let makespan = s.makespan();
    let scale = if makespan > 0.0 { WIDTH / makespan } else { 0.0 };
    let height = TOP * 2.0 + LANE * lanes.len() as f64 + LANE;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{height:.0}" font-family="monospace" font-size="11">"#,
        LABEL + WIDTH + 10.0
    );
    let _ = writeln!(out, r#"<text x="4" y="14">makespan {makespan:.6} s (simulated)</text>"#);
    for (i, r) in lanes.iter().enumerate() {
        let y = TOP + LANE * i as f64;
        let _ = writeln!(out, r#"<text x="4" y="{:.1}">{r}</text>"#, y + LANE * 0.65);
        let _ = writeln!(
            out,
            r##"<line x1="{LABEL}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            y + LANE,
            LABEL + WIDTH,
            y + LANE
        );
    }
    for e in &s.events {
        let lane = lanes.iter().position(|&r| r == e.resource).unwrap();
        let y = TOP + LANE * lane as f64 + 2.0;
        let _ = writeln!(
            out,
            r#"<rect x="{:.3}" y="{y:.1}" width="{:.3}" height="{:.1}" fill="{}"><title>{} device {} mb {} [{:.6}, {:.6}]</title></rect>"#,
            LABEL + e.start * scale,
            e.duration * scale,
            LANE - 4.0,
            color(e.kind),
            e.kind,
            e.device,
            e.microbatch,
            e.start,
            e.end()
        );
    }
    let legend_y = TOP + LANE * lanes.len() as f64 + LANE * 0.7;
    for (i, k) in [
        EventKind::F,
        EventKind::X,
        EventKind::AF,
        EventKind::SF,
        EventKind::B,
        EventKind::W,
        EventKind::Sync,
    ]
    .into_iter()
    .enumerate()
    {
        let x = LABEL + 70.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{}" y="{:.1}">{k}</text>"#,
            legend_y - 9.0,
            color(k),
            x + 14.0,
            legend_y
        );
    }
    out.push_str("</svg>\n");
    out
}
