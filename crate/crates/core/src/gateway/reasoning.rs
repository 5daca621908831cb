//! Removal of think-style reasoning spans from model output.
//!
//! Recognised tags are `<think>`, `<thinking>` and `<reasoning>` in any case.
//! Spans may nest. An unclosed opening tag drops everything after it and sets
//! [`Stripped::unclosed`]. A closing tag with no opener (as emitted by servers
//! that inject the opening tag into the prompt) drops everything before it.

const TAGS: [&str; 3] = ["think", "thinking", "reasoning"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stripped {
    pub text: String,
    /// An opening tag was never closed; its trailing content was dropped.
    pub unclosed: bool,
}

/// Returns `raw` without reasoning spans. Identity when nothing is tagged.
pub fn strip_reasoning(raw: &str) -> String {
    strip_reasoning_flagged(raw).text
}

pub fn strip_reasoning_flagged(raw: &str) -> Stripped {
    let mut out = strip_once(raw);
    // Removing a span can splice a new tag together, e.g. `<thi<think></think>nk>`.
    loop {
        let next = strip_once(&out.text);
        if next.text == out.text {
            return out;
        }
        out = Stripped {
            text: next.text,
            unclosed: out.unclosed || next.unclosed,
        };
    }
}

fn strip_once(raw: &str) -> Stripped {
    let mut kept = String::with_capacity(raw.len());
    let mut depth = 0usize;
    let mut removed = false;
    let mut rest = raw;
    while let Some(lt) = rest.find('<') {
        let (before, from_lt) = rest.split_at(lt);
        if depth == 0 {
            kept.push_str(before);
        }
        match parse_tag(from_lt) {
            Some((closing, len)) => {
                removed = true;
                if closing {
                    if depth == 0 {
                        kept.clear();
                    } else {
                        depth -= 1;
                    }
                } else {
                    depth += 1;
                }
                rest = &from_lt[len..];
            }
            None => {
                if depth == 0 {
                    kept.push('<');
                }
                rest = &from_lt[1..];
            }
        }
    }
    if depth == 0 {
        kept.push_str(rest);
    }
    if !removed {
        return Stripped {
            text: raw.to_string(),
            unclosed: false,
        };
    }
    Stripped {
        text: kept.trim().to_string(),
        unclosed: depth > 0,
    }
}

/// Recognises `<tag>` or `</tag>` at the start of `s`; returns (is_closing, byte length).
fn parse_tag(s: &str) -> Option<(bool, usize)> {
    let body = s.strip_prefix('<')?;
    let (closing, body) = match body.strip_prefix('/') {
        Some(b) => (true, b),
        None => (false, body),
    };
    let end = body.find('>')?;
    let name = &body[..end];
    if TAGS.iter().any(|t| t.eq_ignore_ascii_case(name.trim())) {
        Some((closing, 1 + usize::from(closing) + end + 1))
    } else {
        None
    }
}
