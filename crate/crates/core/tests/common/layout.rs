//! Meaning-preserving layout rewrites of Python source text.

use std::path::Path;

use gistify_core::source::ParsedSource;

fn verbatim_flags(text: &str) -> Vec<bool> {
    let parsed = ParsedSource::parse(text, Path::new("layout.py")).expect("input must parse");
    (1..=text.lines().count() as u32).map(|l| parsed.is_verbatim(l)).collect()
}

/// Rewrites each indentation step of `from` spaces as `to` spaces. Lines
/// inside multi-line strings are left alone.
pub fn reindent(text: &str, from: usize, to: usize) -> String {
    let verbatim = verbatim_flags(text);
    let mut out = String::new();
    for (line, &keep) in text.lines().zip(&verbatim) {
        let ws = line.len() - line.trim_start_matches(' ').len();
        if keep || line.trim().is_empty() || ws % from != 0 {
            out.push_str(line);
        } else {
            out.push_str(&" ".repeat(ws / from * to));
            out.push_str(&line[ws..]);
        }
        out.push('\n');
    }
    out
}

/// Breaks the line after every comma that sits inside brackets, outside of
/// strings and comments.
pub fn reflow(text: &str) -> String {
    let verbatim = verbatim_flags(text);
    let mut out = String::new();
    let mut depth = 0i32;
    for (line, &keep) in text.lines().zip(&verbatim) {
        if keep || line.contains("\"\"\"") || line.contains("'''") {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let indent = &line[..line.len() - line.trim_start().len()];
        let mut quote: Option<char> = None;
        let mut escaped = false;
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            out.push(c);
            if let Some(q) = quote {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
                continue;
            }
            match c {
                '\'' | '"' => quote = Some(c),
                '#' => {
                    out.extend(chars.by_ref());
                    break;
                }
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                ',' if depth > 0 => {
                    while chars.peek() == Some(&' ') {
                        chars.next();
                    }
                    if chars.peek().is_some() {
                        out.push('\n');
                        out.push_str(indent);
                        out.push_str("        ");
                    }
                }
                _ => {}
            }
        }
        out.push('\n');
    }
    out
}

fn plain_import(line: &str) -> Option<(&str, Vec<&str>)> {
    let body = line.trim_start();
    let indent = &line[..line.len() - body.len()];
    let names = body.strip_prefix("import ")?;
    if names.contains('#') || names.contains('(') {
        return None;
    }
    Some((indent, names.split(',').map(str::trim).collect()))
}

/// `import a, b` becomes one statement per name.
pub fn split_imports(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        match plain_import(line) {
            Some((indent, names)) if names.len() > 1 => {
                for n in names {
                    out.push_str(&format!("{indent}import {n}\n"));
                }
            }
            _ => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

/// Adjacent plain imports at the same indentation are merged into one.
pub fn combine_imports(text: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut pending: Option<(String, Vec<String>)> = None;
    let flush = |out: &mut Vec<String>, pending: &mut Option<(String, Vec<String>)>| {
        if let Some((indent, names)) = pending.take() {
            out.push(format!("{indent}import {}", names.join(", ")));
        }
    };
    for line in text.lines() {
        match plain_import(line) {
            Some((indent, names)) => {
                if pending.as_ref().is_some_and(|(i, _)| i != indent) {
                    flush(&mut out, &mut pending);
                }
                let entry = pending.get_or_insert_with(|| (indent.to_string(), Vec::new()));
                entry.1.extend(names.into_iter().map(str::to_string));
            }
            None => {
                flush(&mut out, &mut pending);
                out.push(line.to_string());
            }
        }
    }
    flush(&mut out, &mut pending);
    let mut text = out.join("\n");
    text.push('\n');
    text
}

pub type Rewrite = (&'static str, fn(&str) -> String);

/// Every rewrite, by name.
pub fn rewrites() -> Vec<Rewrite> {
    vec![
        ("reindent-4-to-2", |t| reindent(t, 4, 2)),
        ("reindent-4-to-8", |t| reindent(t, 4, 8)),
        ("reflow", reflow),
        ("split-imports", split_imports),
        ("combine-imports", combine_imports),
        ("all", |t| combine_imports(&reflow(&reindent(t, 4, 2)))),
    ]
}
