//! LaTeX normalization: drop `\tag`, unwrap `\text`, strip `equation`
//! environment markers, collapse whitespace.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    UnbalancedBraces,
    Empty,
    /// A `\tag` that could not be removed (no braced argument, or a longer
    /// control word such as `\tagged`).
    ResidualTag,
}

impl Rejection {
    pub fn rule(self) -> &'static str {
        match self {
            Rejection::UnbalancedBraces => "unbalanced_braces",
            Rejection::Empty => "empty_latex",
            Rejection::ResidualTag => "residual_tag",
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.rule())
    }
}

/// Clean one LaTeX string. The result is a fixpoint, so cleaning is idempotent.
pub fn clean_latex(latex: &str) -> Result<String, Rejection> {
    let mut cur = collapse_whitespace(latex);
    loop {
        let next = collapse_whitespace(&clean_pass(&cur)?);
        if next == cur {
            break;
        }
        cur = next;
    }
    if cur.is_empty() {
        return Err(Rejection::Empty);
    }
    if cur.contains("\\tag") {
        return Err(Rejection::ResidualTag);
    }
    if !braces_balanced(&cur) {
        return Err(Rejection::UnbalancedBraces);
    }
    Ok(cur)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn clean_pass(s: &str) -> Result<String, Rejection> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i] != '\\' {
            out.push(chars[i]);
            i += 1;
            continue;
        }
        let name_end = (i + 1..chars.len())
            .find(|&j| !chars[j].is_ascii_alphabetic())
            .unwrap_or(chars.len());
        if name_end == i + 1 {
            // control symbol such as `\{` or `\\`
            out.push('\\');
            if let Some(&c) = chars.get(i + 1) {
                out.push(c);
            }
            i += 2;
            continue;
        }
        let name: String = chars[i + 1..name_end].iter().collect();
        match name.as_str() {
            "tag" => {
                let mut j = name_end;
                if chars.get(j) == Some(&'*') {
                    j += 1;
                }
                let j = skip_spaces(&chars, j);
                if chars.get(j) == Some(&'{') {
                    let close = matching_brace(&chars, j).ok_or(Rejection::UnbalancedBraces)?;
                    out.push(' ');
                    i = close + 1;
                } else {
                    out.push_str("\\tag");
                    i = name_end;
                }
            }
            "text" => {
                let j = skip_spaces(&chars, name_end);
                if chars.get(j) == Some(&'{') {
                    let close = matching_brace(&chars, j).ok_or(Rejection::UnbalancedBraces)?;
                    let inner: String = chars[j + 1..close].iter().collect();
                    if ends_with_control_word(&out) && inner.starts_with(|c: char| c.is_ascii_alphabetic()) {
                        out.push(' ');
                    }
                    out.push_str(&inner);
                    if ends_with_control_word(&out)
                        && chars.get(close + 1).is_some_and(|c| c.is_ascii_alphabetic())
                    {
                        out.push(' ');
                    }
                    i = close + 1;
                } else {
                    out.push_str("\\text");
                    i = name_end;
                }
            }
            "begin" | "end" => {
                let rest: String = chars[name_end..chars.len().min(name_end + 11)].iter().collect();
                if let Some(env) = ["{equation*}", "{equation}"].iter().find(|e| rest.starts_with(*e)) {
                    out.push(' ');
                    i = name_end + env.chars().count();
                } else {
                    out.push('\\');
                    out.push_str(&name);
                    i = name_end;
                }
            }
            _ => {
                out.push('\\');
                out.push_str(&name);
                i = name_end;
            }
        }
    }
    Ok(out)
}

fn skip_spaces(chars: &[char], mut j: usize) -> usize {
    while chars.get(j).is_some_and(|c| c.is_whitespace()) {
        j += 1;
    }
    j
}

/// Index of the brace closing the group opened at `open`, honoring escapes.
fn matching_brace(chars: &[char], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut j = open;
    while j < chars.len() {
        match chars[j] {
            '\\' => j += 1,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(j);
                }
            }
            _ => {}
        }
        j += 1;
    }
    None
}

fn ends_with_control_word(s: &str) -> bool {
    let trimmed = s.trim_end_matches(|c: char| c.is_ascii_alphabetic());
    trimmed.len() < s.len() && trimmed.ends_with('\\') && !trimmed.ends_with("\\\\")
}

/// Grouping braces balance, ignoring escaped `\{` and `\}`.
pub fn braces_balanced(s: &str) -> bool {
    let mut depth = 0i64;
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                chars.next();
            }
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}
