//! Lenient extraction of structured data from model output.

use serde_json::Value as Json;

/// End offset (exclusive) of the balanced JSON value starting at `start`,
/// which must be `{` or `[`.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Strips `//` line comments outside strings, as in the prompt's own
/// format examples.
fn strip_comments(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for line in s.lines() {
        let mut in_str = false;
        let mut escaped = false;
        let mut cut = line.len();
        let b = line.as_bytes();
        for i in 0..b.len() {
            let c = b[i];
            if in_str {
                match c {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
            } else if c == b'"' {
                in_str = true;
            } else if c == b'/' && b.get(i + 1) == Some(&b'/') {
                cut = i;
                break;
            }
        }
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

fn parse_slice(s: &str) -> Option<Json> {
    serde_json::from_str(s)
        .ok()
        .or_else(|| serde_json::from_str(&strip_comments(s)).ok())
}

/// Every balanced JSON value that parses, scanning left to right and
/// skipping over the interior of accepted values.
fn json_values(text: &str, open: &[u8]) -> Vec<(usize, Json)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let b = text.as_bytes()[i];
        if open.contains(&b) {
            if let Some(end) = balanced_end(text, i) {
                if let Some(v) = parse_slice(&text[i..end]) {
                    out.push((i, v));
                    i = end;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

/// First balanced JSON object or array embedded in `text`.
pub fn first_json(text: &str) -> Option<Json> {
    json_values(text, b"{[").into_iter().next().map(|(_, v)| v)
}

/// First balanced JSON array embedded in `text`.
pub fn first_json_array(text: &str) -> Option<Vec<Json>> {
    json_values(text, b"[")
        .into_iter()
        .find_map(|(_, v)| match v {
            Json::Array(a) => Some(a),
            _ => None,
        })
}

/// First balanced JSON object embedded in `text`.
pub fn first_json_object(text: &str) -> Option<Json> {
    json_values(text, b"{").into_iter().next().map(|(_, v)| v)
}

pub const FACT_MARKER: &str = "Generated Data Fact:";

/// Candidate fact objects in a fact-extraction response. Objects
/// following the output marker are preferred; otherwise a top-level array
/// of objects or every top-level object is used. Unparsable segments
/// after a marker are reported as `Err` so they can be counted as drops.
pub fn fact_candidates(text: &str) -> Vec<Result<Json, String>> {
    let marked: Vec<usize> = text.match_indices(FACT_MARKER).map(|(i, _)| i + FACT_MARKER.len()).collect();
    if !marked.is_empty() {
        return marked
            .into_iter()
            .map(|start| {
                let rel = text[start..].find('{').ok_or("marker without an object")?;
                let s = start + rel;
                let end = balanced_end(text, s).ok_or("unbalanced object after marker")?;
                parse_slice(&text[s..end]).ok_or_else(|| "invalid JSON after marker".to_string())
            })
            .collect();
    }
    match first_json(text) {
        Some(Json::Array(items)) => items.into_iter().map(Ok).collect(),
        _ => json_values(text, b"{").into_iter().map(|(_, v)| Ok(v)).collect(),
    }
}

/// Removes a surrounding markdown code fence and a leading `SQL:` label.
pub fn strip_code_fences(text: &str) -> String {
    let t = text.trim();
    let inner = if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.split_once('\n').map_or("", |(_, body)| body);
        match rest.rfind("```") {
            Some(end) => &rest[..end],
            None => rest,
        }
    } else if let (Some(s), Some(e)) = (t.find("```"), t.rfind("```")) {
        if e > s {
            let body = &t[s + 3..e];
            body.split_once('\n').map_or(body, |(_, b)| b)
        } else {
            t
        }
    } else {
        t
    };
    let inner = inner.trim();
    inner
        .strip_prefix("SQL:")
        .or_else(|| inner.strip_prefix("sql:"))
        .unwrap_or(inner)
        .trim()
        .to_string()
}

/// Number from a JSON number, numeric string, or a one-element list.
pub fn loose_number(v: &Json) -> Option<f64> {
    match v {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => s.trim().trim_end_matches('%').trim().parse().ok(),
        Json::Array(a) if a.len() == 1 => loose_number(&a[0]),
        _ => None,
    }
}

/// Text from a string, a list of strings, or any other value.
pub fn loose_text(v: &Json) -> String {
    match v {
        Json::String(s) => s.clone(),
        Json::Array(a) => a.iter().map(loose_text).collect::<Vec<_>>().join(" "),
        Json::Null => String::new(),
        other => other.to_string(),
    }
}

/// Case- and separator-insensitive key lookup.
pub fn get_key<'a>(obj: &'a serde_json::Map<String, Json>, key: &str) -> Option<&'a Json> {
    let norm = |s: &str| -> String { s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase() };
    let want = norm(key);
    obj.iter().find(|(k, _)| norm(k) == want).map(|(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn json_inside_prose() {
        let t = "Sure! Here you go:\n{\"a\": [1, 2, \"}\"]} trailing {bad";
        assert_eq!(first_json(t), Some(json!({"a": [1, 2, "}"]})));
        assert_eq!(first_json("nothing"), None);
    }

    #[test]
    fn commented_json() {
        let t = "[{\"aggregate\": \"none\",  // Options: \"none\", \"max\"\n \"field\": \"v\"}]";
        assert_eq!(first_json(t), Some(json!([{"aggregate": "none", "field": "v"}])));
    }

    #[test]
    fn marker_candidates() {
        let t = "Step 1 ... Generated Data Fact: {\"type\": \"value\"}\nthen Generated Data Fact: {oops}\n";
        let c = fact_candidates(t);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], Ok(json!({"type": "value"})));
        assert!(c[1].is_err());
    }

    #[test]
    fn fences() {
        assert_eq!(strip_code_fences("```sql\nSELECT 1\n```"), "SELECT 1");
        assert_eq!(strip_code_fences("Here:\n```\nSELECT a FROM t\n```\nDone"), "SELECT a FROM t");
        assert_eq!(strip_code_fences("  SELECT a FROM t  "), "SELECT a FROM t");
    }

    #[test]
    fn loose_values() {
        assert_eq!(loose_number(&json!([0.76])), Some(0.76));
        assert_eq!(loose_number(&json!("0.4")), Some(0.4));
        assert_eq!(loose_text(&json!(["a", "b"])), "a b");
    }
}
