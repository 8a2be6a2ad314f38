//! Canonical rendering of logical lines.
//!
//! A logical line is rendered from its lexer tokens: each token keeps its
//! exact source text and tokens are concatenated with a single space only
//! where two word-like tokens would otherwise fuse. Indentation, line
//! continuations, comments and redundant spacing disappear, while string
//! literals are never touched.

use rustpython_parser::ast::{self, Ranged};
use rustpython_parser::{lexer::lex, Mode, Parse, Tok};

/// One lexed token ready for rendering.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Piece<'a> {
    pub text: &'a str,
    pub numeric: bool,
}

impl<'a> Piece<'a> {
    pub fn word(text: &'a str) -> Self {
        Piece {
            text,
            numeric: false,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Concatenates token texts, inserting a single space only where required to
/// keep adjacent tokens apart.
pub(crate) fn join_pieces(pieces: &[Piece<'_>]) -> String {
    let mut out = String::new();
    let mut prev_numeric = false;
    for piece in pieces {
        if let (Some(a), Some(b)) = (out.chars().last(), piece.text.chars().next()) {
            let fuse = (is_word_char(a) && is_word_char(b)) || (prev_numeric && (is_word_char(b) || b == '.'));
            if fuse {
                out.push(' ');
            }
        }
        out.push_str(piece.text);
        prev_numeric = piece.numeric;
    }
    out
}

pub(crate) fn render_import(stmt: &ast::Stmt) -> Option<Vec<String>> {
    match stmt {
        ast::Stmt::Import(imp) => Some(
            imp.names
                .iter()
                .map(|alias| {
                    let mut pieces = vec![Piece::word("import")];
                    push_dotted(&mut pieces, alias.name.as_str());
                    push_alias(&mut pieces, alias);
                    join_pieces(&pieces)
                })
                .collect(),
        ),
        ast::Stmt::ImportFrom(imp) => {
            let level = imp.level.as_ref().map(|l| l.to_usize()).unwrap_or(0);
            Some(
                imp.names
                    .iter()
                    .map(|alias| {
                        let mut pieces = vec![Piece::word("from")];
                        pieces.extend(std::iter::repeat_n(Piece::word("."), level));
                        if let Some(module) = &imp.module {
                            push_dotted(&mut pieces, module.as_str());
                        }
                        pieces.push(Piece::word("import"));
                        pieces.push(Piece::word(alias.name.as_str()));
                        push_alias(&mut pieces, alias);
                        join_pieces(&pieces)
                    })
                    .collect(),
            )
        }
        _ => None,
    }
}

fn push_dotted<'a>(pieces: &mut Vec<Piece<'a>>, dotted: &'a str) {
    for (i, part) in dotted.split('.').enumerate() {
        if i > 0 {
            pieces.push(Piece::word("."));
        }
        pieces.push(Piece::word(part));
    }
}

fn push_alias<'a>(pieces: &mut Vec<Piece<'a>>, alias: &'a ast::Alias) {
    if let Some(asname) = &alias.asname {
        pieces.push(Piece::word("as"));
        pieces.push(Piece::word(asname.as_str()));
    }
}

pub(crate) fn is_numeric(tok: &Tok) -> bool {
    matches!(tok, Tok::Int { .. } | Tok::Float { .. } | Tok::Complex { .. })
}

/// Normalizes a free-standing fragment of source text.
///
/// The fragment may hold several statements (or a combined import), so the
/// result can contain more than one line. Fragments that do not parse as
/// complete statements (a lone `def f(x):` header, `else:`) are rendered
/// token by token, split at statement separators.
pub fn normalize_fragment(text: &str) -> Vec<String> {
    if let Ok(suite) = ast::Suite::parse(text, "<fragment>") {
        if suite.len() == 1 {
            if let Some(lines) = render_import(&suite[0]) {
                return lines;
            }
        }
        if suite.iter().all(is_simple) {
            return suite
                .iter()
                .flat_map(|s| render_import(s).unwrap_or_else(|| vec![render_range(text, s.range().start().to_usize(), s.range().end().to_usize())]))
                .collect();
        }
    }
    render_tokens(text)
}

fn is_simple(stmt: &ast::Stmt) -> bool {
    !matches!(
        stmt,
        ast::Stmt::FunctionDef(_)
            | ast::Stmt::AsyncFunctionDef(_)
            | ast::Stmt::ClassDef(_)
            | ast::Stmt::If(_)
            | ast::Stmt::For(_)
            | ast::Stmt::AsyncFor(_)
            | ast::Stmt::While(_)
            | ast::Stmt::With(_)
            | ast::Stmt::AsyncWith(_)
            | ast::Stmt::Try(_)
            | ast::Stmt::TryStar(_)
            | ast::Stmt::Match(_)
    )
}

fn render_range(text: &str, start: usize, end: usize) -> String {
    let slice = &text[start..end];
    let pieces: Vec<Piece<'_>> = lex(slice, Mode::Module)
        .filter_map(Result::ok)
        .filter(|(tok, _)| !is_trivia(tok) && !matches!(tok, Tok::Newline | Tok::Semi))
        .map(|(tok, range)| Piece {
            text: &slice[range.start().to_usize()..range.end().to_usize()],
            numeric: is_numeric(&tok),
        })
        .collect();
    join_pieces(&pieces)
}

fn render_tokens(text: &str) -> Vec<String> {
    let mut lines = Vec::new();
    let mut current: Vec<Piece<'_>> = Vec::new();
    let mut tokens = Vec::new();
    for item in lex(text, Mode::Module) {
        match item {
            Ok(t) => tokens.push(t),
            Err(_) => {
                return vec![text.split_whitespace().collect::<Vec<_>>().join(" ")]
                    .into_iter()
                    .filter(|s| !s.is_empty())
                    .collect()
            }
        }
    }
    for (tok, range) in &tokens {
        if is_trivia(tok) {
            continue;
        }
        if matches!(tok, Tok::Newline | Tok::Semi) {
            if !current.is_empty() {
                lines.push(join_pieces(&current));
                current.clear();
            }
            continue;
        }
        current.push(Piece {
            text: &text[range.start().to_usize()..range.end().to_usize()],
            numeric: is_numeric(tok),
        });
    }
    if !current.is_empty() {
        lines.push(join_pieces(&current));
    }
    lines
}

pub(crate) fn is_trivia(tok: &Tok) -> bool {
    matches!(
        tok,
        Tok::Comment(_) | Tok::NonLogicalNewline | Tok::Indent | Tok::Dedent | Tok::EndOfFile
    )
}
