//! Hand-written SVG line chart of per-bucket counters.

use std::fmt::Write;

use crate::monitor::MetricsBucket;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

/// Series drawn by [`render_svg`], with their stroke colours.
pub const SERIES: [(&str, &str); 3] = [("sent", "#1f77b4"), ("deleted", "#2ca02c"), ("dead_lettered", "#d62728")];

fn value(b: &MetricsBucket, series: &str) -> u64 {
    match series {
        "sent" => b.sent,
        "deleted" => b.deleted,
        _ => b.dead_lettered,
    }
}

/// One `<polyline>` per series, x = bucket index, y scaled to the largest
/// count in any series.
pub fn render_svg(buckets: &[MetricsBucket]) -> String {
    let max = buckets
        .iter()
        .flat_map(|b| SERIES.iter().map(move |(s, _)| value(b, s)))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let step = if buckets.len() > 1 {
        plot_w / (buckets.len() - 1) as f64
    } else {
        0.0
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0, x1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0} {MARGIN} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="12">{max}</text>"#, MARGIN + 4.0);
    let _ = writeln!(svg, r#"<text x="4" y="{y0}" font-size="12">0</text>"#);
    if let (Some(first), Some(last)) = (buckets.first(), buckets.last()) {
        let fmt = "%H:%M:%S";
        let _ = writeln!(
            svg,
            r#"<text x="{x0}" y="{}" font-size="12">{}</text>"#,
            y0 + 16.0,
            first.window_start.format(fmt)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x1}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
            y0 + 16.0,
            last.window_start.format(fmt)
        );
    }
    for (i, (name, colour)) in SERIES.iter().enumerate() {
        let points: Vec<String> = buckets
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let x = MARGIN + step * j as f64;
                let y = y0 - plot_h * value(b, name) as f64 / max;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline id="{name}" points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{name}</text>"#,
            x1 - 110.0,
            MARGIN + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use std::time::Duration;

    fn bucket(i: i64, sent: u64) -> MetricsBucket {
        MetricsBucket {
            window_start: Utc.with_ymd_and_hms(2018, 6, 17, 15, 0, 0).unwrap() + chrono::TimeDelta::minutes(5 * i),
            window: Duration::from_secs(300),
            sent,
            received: sent,
            deleted: sent / 2,
            dead_lettered: 1,
            items_ingested: 0,
        }
    }

    #[test]
    fn one_polyline_per_series() {
        let buckets: Vec<_> = (0..5).map(|i| bucket(i, 10 * i as u64)).collect();
        let svg = render_svg(&buckets);
        assert_eq!(svg.matches("<polyline").count(), 3);
        for (name, _) in SERIES {
            assert!(svg.contains(&format!("id=\"{name}\"")));
        }
        // five points in each series
        let sent = svg.lines().find(|l| l.contains("id=\"sent\"")).unwrap();
        assert_eq!(sent.matches(',').count(), 5);
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = render_svg(&[]);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.ends_with("</svg>\n"));
    }
}
