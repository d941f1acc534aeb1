//! Rule-based HTML to markdown cleaner for crawled pages.

use regex::{Captures, Regex};

pub struct HtmlCleaner {
    drop_blocks: Vec<Regex>,
    base64: Regex,
    heading: Regex,
    link: Regex,
    list_item: Regex,
    breaks: Regex,
    tag: Regex,
    blank_lines: Regex,
    spaces: Regex,
}

impl Default for HtmlCleaner {
    fn default() -> Self {
        Self::new()
    }
}

impl HtmlCleaner {
    pub fn new() -> Self {
        let block = |name: &str| {
            Regex::new(&format!(r"(?is)<{name}\b[^>]*>.*?</{name}\s*>")).expect("static regex")
        };
        HtmlCleaner {
            drop_blocks: vec![
                Regex::new(r"(?s)<!--.*?-->").expect("static regex"),
                block("script"),
                block("style"),
                block("noscript"),
                block("svg"),
                block("head"),
            ],
            base64: Regex::new(
                r#"(?is)<img\b[^>]*src\s*=\s*["']?data:[^>]*>|data:[a-z]+/[a-z0-9.+-]+;base64,[A-Za-z0-9+/=]+"#,
            )
            .expect("static regex"),
            heading: Regex::new(r"(?is)<h([1-6])\b[^>]*>(.*?)</h[1-6]\s*>").expect("static regex"),
            link: Regex::new(r#"(?is)<a\b[^>]*href\s*=\s*["']([^"']*)["'][^>]*>(.*?)</a\s*>"#)
                .expect("static regex"),
            list_item: Regex::new(r"(?i)<li\b[^>]*>").expect("static regex"),
            breaks: Regex::new(r"(?i)<(br|/p|/div|/tr|/ul|/ol|/table|/section|/article)\b[^>]*>")
                .expect("static regex"),
            tag: Regex::new(r"(?s)<[^>]*>").expect("static regex"),
            blank_lines: Regex::new(r"\n\s*\n(\s*\n)+").expect("static regex"),
            spaces: Regex::new(r"[ \t]+").expect("static regex"),
        }
    }

    pub fn to_markdown(&self, html: &str) -> String {
        let mut s = html.to_string();
        for re in &self.drop_blocks {
            s = re.replace_all(&s, "").into_owned();
        }
        s = self.base64.replace_all(&s, "").into_owned();
        s = self
            .heading
            .replace_all(&s, |c: &Captures| {
                let level: usize = c[1].parse().unwrap_or(1);
                format!("\n{} {}\n", "#".repeat(level), c[2].trim())
            })
            .into_owned();
        s = self
            .link
            .replace_all(&s, |c: &Captures| format!("[{}]({})", c[2].trim(), &c[1]))
            .into_owned();
        s = self.list_item.replace_all(&s, "\n- ").into_owned();
        s = self.breaks.replace_all(&s, "\n").into_owned();
        s = self.tag.replace_all(&s, "").into_owned();
        s = decode_entities(&s);
        s = self.spaces.replace_all(&s, " ").into_owned();
        let lines: Vec<&str> = s.lines().map(str::trim).collect();
        let s = lines.join("\n");
        self.blank_lines.replace_all(&s, "\n\n").trim().to_string()
    }
}

fn decode_entities(s: &str) -> String {
    s.replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_scripts_styles_and_inline_images() {
        let html = r#"<html><head><title>t</title><style>p{}</style></head>
<body><script>var x = "<p>";</script><h2>Paris</h2>
<p>Capital of <a href="https://fr.example">France</a> &amp; more.</p>
<img src="data:image/png;base64,iVBORw0KGgo=">
<ul><li>one</li><li>two</li></ul></body></html>"#;
        let md = HtmlCleaner::new().to_markdown(html);
        assert_eq!(
            md,
            "## Paris\n\nCapital of [France](https://fr.example) & more.\n\n- one\n- two"
        );
    }
}
