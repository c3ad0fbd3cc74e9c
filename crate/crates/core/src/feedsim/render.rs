use chrono::{DateTime, TimeDelta, TimeZone, Utc};

use crate::worker::FeedFormat;

pub const SIM_HOST: &str = "sim.feedmix.test";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimItem {
    pub guid: String,
    pub link: String,
    pub title: String,
    pub published: DateTime<Utc>,
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 6, 1, 0, 0, 0).unwrap()
}

/// Item `n` of feed `feed`. Identical on every call.
pub fn sim_item(feed: usize, n: u64) -> SimItem {
    SimItem {
        guid: format!("feed-{feed}-item-{n}"),
        link: format!("https://{SIM_HOST}/feeds/{feed}/items/{n}"),
        title: format!("Item {n} of feed {feed}"),
        published: epoch() + TimeDelta::minutes(n as i64),
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Serializes a feed document. Output depends only on the arguments.
pub fn render_feed(format: FeedFormat, feed: usize, items: &[SimItem]) -> String {
    let mut out = String::with_capacity(256 + items.len() * 256);
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    match format {
        FeedFormat::Rss2 => {
            out.push_str("<rss version=\"2.0\"><channel>");
            out.push_str(&format!(
                "<title>Feed {feed}</title><link>https://{SIM_HOST}/feeds/{feed}</link><description>synthetic</description>"
            ));
            for it in items {
                out.push_str(&format!(
                    "<item><title>{}</title><link>{}</link><guid>{}</guid><pubDate>{}</pubDate></item>",
                    esc(&it.title),
                    esc(&it.link),
                    esc(&it.guid),
                    it.published.to_rfc2822()
                ));
            }
            out.push_str("</channel></rss>\n");
        }
        FeedFormat::Atom => {
            let updated = items.iter().map(|i| i.published).max().unwrap_or_else(epoch);
            out.push_str("<feed xmlns=\"http://www.w3.org/2005/Atom\">");
            out.push_str(&format!(
                "<title>Feed {feed}</title><id>urn:feedmix:sim:{feed}</id><updated>{}</updated>",
                updated.to_rfc3339()
            ));
            for it in items {
                out.push_str(&format!(
                    "<entry><title>{}</title><link href=\"{}\"/><id>{}</id><updated>{}</updated></entry>",
                    esc(&it.title),
                    esc(&it.link),
                    esc(&it.guid),
                    it.published.to_rfc3339()
                ));
            }
            out.push_str("</feed>\n");
        }
    }
    out
}
