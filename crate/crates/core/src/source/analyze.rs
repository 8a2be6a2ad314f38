use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rustpython_parser::ast::{self, Ranged};
use rustpython_parser::{lexer::lex, Mode, Parse, Tok};

use super::normalize::{is_numeric, is_trivia, join_pieces, render_import, Piece};
use super::{
    BlockKind, CodeBlock, CodeBlockTree, LineClassification, LineSpan, LineTag, ParsedSource, SourceError,
};

/// Byte offset to 1-based line number.
struct LineIndex {
    starts: Vec<usize>,
}

impl LineIndex {
    fn new(text: &str) -> Self {
        let mut starts = vec![0];
        for (i, b) in text.bytes().enumerate() {
            if b == b'\n' && i + 1 < text.len() {
                starts.push(i + 1);
            }
        }
        LineIndex { starts }
    }

    fn line_of(&self, offset: usize) -> u32 {
        self.starts.partition_point(|&s| s <= offset) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Decorator,
    DefHeader,
    ClassHeader,
    HandlerHeader,
    /// `try:`, `else:`, `finally:`; markers that run no code of their own.
    Clause,
    Docstring,
    Declaration,
    Statement,
}

#[derive(Clone, Debug)]
struct StartInfo {
    role: Role,
    in_handler: bool,
    imports: Option<Vec<String>>,
}

#[derive(Clone, Default)]
struct Context {
    chain: Vec<String>,
    tree_parent: Option<usize>,
    in_handler: bool,
}

struct RawBlock {
    kind: BlockKind,
    name: Option<String>,
    parent_chain: Vec<String>,
    span: LineSpan,
    parent: Option<usize>,
    module_leading: bool,
}

struct Walker<'a> {
    lines: &'a LineIndex,
    starts: BTreeMap<usize, StartInfo>,
    blocks: Vec<RawBlock>,
    module_docstring: bool,
}

impl Walker<'_> {
    fn mark(&mut self, offset: usize, role: Role, ctx: &Context) {
        self.starts.insert(
            offset,
            StartInfo {
                role,
                in_handler: ctx.in_handler,
                imports: None,
            },
        );
    }

    fn push_block(&mut self, block: RawBlock) -> usize {
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    fn span_of(&self, stmt: &ast::Stmt, decorators: &[ast::Expr]) -> LineSpan {
        let start = decorators
            .first()
            .map(|d| d.range().start().to_usize())
            .unwrap_or_else(|| stmt.range().start().to_usize());
        let end = stmt.range().end().to_usize().saturating_sub(1);
        LineSpan {
            start: self.lines.line_of(start),
            end: self.lines.line_of(end),
        }
    }

    fn walk_body(&mut self, body: &[ast::Stmt], ctx: &Context, docstring_allowed: bool) {
        for (i, stmt) in body.iter().enumerate() {
            if i == 0 && docstring_allowed && is_docstring(stmt) {
                self.mark(stmt.range().start().to_usize(), Role::Docstring, ctx);
                continue;
            }
            self.walk_stmt(stmt, ctx, i == 0);
        }
    }

    fn walk_definition(
        &mut self,
        stmt: &ast::Stmt,
        kind: BlockKind,
        name: &str,
        decorators: &[ast::Expr],
        body: &[ast::Stmt],
        ctx: &Context,
    ) {
        for d in decorators {
            self.mark(d.range().start().to_usize(), Role::Decorator, ctx);
        }
        let role = if kind == BlockKind::Class {
            Role::ClassHeader
        } else {
            Role::DefHeader
        };
        self.mark(stmt.range().start().to_usize(), role, ctx);
        let span = self.span_of(stmt, decorators);
        let idx = self.push_block(RawBlock {
            kind,
            name: Some(name.to_string()),
            parent_chain: ctx.chain.clone(),
            span,
            parent: ctx.tree_parent,
            module_leading: false,
        });
        let mut inner = ctx.clone();
        inner.chain.push(name.to_string());
        inner.tree_parent = Some(idx);
        self.walk_body(body, &inner, true);
    }

    fn walk_stmt(&mut self, stmt: &ast::Stmt, ctx: &Context, first_in_body: bool) {
        use ast::Stmt;
        // Statements directly at module level that are not definitions form
        // their own top-level units.
        let mut ctx = ctx.clone();
        let is_def = matches!(stmt, Stmt::FunctionDef(_) | Stmt::AsyncFunctionDef(_) | Stmt::ClassDef(_));
        if ctx.tree_parent.is_none() && ctx.chain.is_empty() && !is_def {
            let span = self.span_of(stmt, &[]);
            let idx = self.push_block(RawBlock {
                kind: BlockKind::ToplevelUnit,
                name: None,
                parent_chain: Vec::new(),
                span,
                parent: None,
                module_leading: first_in_body && self.module_docstring,
            });
            ctx.tree_parent = Some(idx);
        }
        let start = stmt.range().start().to_usize();
        match stmt {
            Stmt::FunctionDef(f) => {
                self.walk_definition(stmt, BlockKind::Function, f.name.as_str(), &f.decorator_list, &f.body, &ctx)
            }
            Stmt::AsyncFunctionDef(f) => {
                self.walk_definition(stmt, BlockKind::Function, f.name.as_str(), &f.decorator_list, &f.body, &ctx)
            }
            Stmt::ClassDef(c) => {
                self.walk_definition(stmt, BlockKind::Class, c.name.as_str(), &c.decorator_list, &c.body, &ctx)
            }
            Stmt::If(s) => {
                self.mark(start, Role::Statement, &ctx);
                self.walk_body(&s.body, &ctx, false);
                self.walk_body(&s.orelse, &ctx, false);
            }
            Stmt::For(s) => {
                self.mark(start, Role::Statement, &ctx);
                self.walk_body(&s.body, &ctx, false);
                self.walk_body(&s.orelse, &ctx, false);
            }
            Stmt::AsyncFor(s) => {
                self.mark(start, Role::Statement, &ctx);
                self.walk_body(&s.body, &ctx, false);
                self.walk_body(&s.orelse, &ctx, false);
            }
            Stmt::While(s) => {
                self.mark(start, Role::Statement, &ctx);
                self.walk_body(&s.body, &ctx, false);
                self.walk_body(&s.orelse, &ctx, false);
            }
            Stmt::With(s) => {
                self.mark(start, Role::Statement, &ctx);
                self.walk_body(&s.body, &ctx, false);
            }
            Stmt::AsyncWith(s) => {
                self.mark(start, Role::Statement, &ctx);
                self.walk_body(&s.body, &ctx, false);
            }
            Stmt::Match(s) => {
                self.mark(start, Role::Statement, &ctx);
                for case in &s.cases {
                    self.walk_body(&case.body, &ctx, false);
                }
            }
            Stmt::Try(s) => self.walk_try(start, &s.body, &s.handlers, &s.orelse, &s.finalbody, &ctx),
            Stmt::TryStar(s) => self.walk_try(start, &s.body, &s.handlers, &s.orelse, &s.finalbody, &ctx),
            Stmt::Import(_) | Stmt::ImportFrom(_) => {
                self.starts.insert(
                    start,
                    StartInfo {
                        role: Role::Statement,
                        in_handler: ctx.in_handler,
                        imports: render_import(stmt),
                    },
                );
            }
            Stmt::Global(_) | Stmt::Nonlocal(_) => self.mark(start, Role::Declaration, &ctx),
            _ => self.mark(start, Role::Statement, &ctx),
        }
    }

    fn walk_try(
        &mut self,
        start: usize,
        body: &[ast::Stmt],
        handlers: &[ast::ExceptHandler],
        orelse: &[ast::Stmt],
        finalbody: &[ast::Stmt],
        ctx: &Context,
    ) {
        self.mark(start, Role::Clause, ctx);
        self.walk_body(body, ctx, false);
        for handler in handlers {
            let ast::ExceptHandler::ExceptHandler(h) = handler;
            self.mark(h.range.start().to_usize(), Role::HandlerHeader, ctx);
            let mut inner = ctx.clone();
            inner.in_handler = true;
            self.walk_body(&h.body, &inner, false);
        }
        self.walk_body(orelse, ctx, false);
        self.walk_body(finalbody, ctx, false);
    }
}

fn is_docstring(stmt: &ast::Stmt) -> bool {
    match stmt {
        ast::Stmt::Expr(e) => matches!(
            e.value.as_ref(),
            ast::Expr::Constant(c) if matches!(c.value, ast::Constant::Str(_))
        ),
        _ => false,
    }
}

/// A logical unit of code: one simple statement, one compound-statement
/// header, one decorator or one clause keyword line.
struct Unit {
    first_line: u32,
    last_line: u32,
    role: Role,
    in_handler: bool,
    normalized: Vec<String>,
}

fn tag_for(role: Role, in_handler: bool) -> LineTag {
    match role {
        Role::Decorator | Role::DefHeader | Role::ClassHeader | Role::HandlerHeader => LineTag::PotentiallyExecutable,
        Role::Clause | Role::Docstring | Role::Declaration => LineTag::NonExecutable,
        Role::Statement if in_handler => LineTag::PotentiallyExecutable,
        Role::Statement => LineTag::Executable,
    }
}

pub(super) fn analyze(text: &str, path: &Path, module_docstring: bool) -> Result<ParsedSource, SourceError> {
    let path_str = path.display().to_string();
    let suite = ast::Suite::parse(text, &path_str).map_err(|e| SourceError::SyntaxInvalid {
        path: path_str.clone(),
        line: LineIndex::new(text).line_of(e.offset.to_usize()),
        message: e.error.to_string(),
    })?;
    let index = LineIndex::new(text);
    let line_count = text.lines().count() as u32;

    let mut walker = Walker {
        lines: &index,
        starts: BTreeMap::new(),
        blocks: Vec::new(),
        module_docstring,
    };
    walker.walk_body(&suite, &Context::default(), module_docstring);
    let Walker { starts, blocks: raw_blocks, .. } = walker;

    // Token pass: code-bearing lines, string continuation lines and units.
    let mut has_code = vec![false; line_count as usize + 2];
    let mut verbatim = vec![false; line_count as usize + 2];
    let mut units: Vec<Unit> = Vec::new();
    let mut pending: Vec<(Tok, usize, usize)> = Vec::new();

    let flush = |pending: &mut Vec<(Tok, usize, usize)>, units: &mut Vec<Unit>| {
        if pending.is_empty() {
            return;
        }
        let first = &pending[0];
        let key = if matches!(first.0, Tok::At) {
            pending.get(1).map(|t| t.1).unwrap_or(first.1)
        } else {
            first.1
        };
        let info = starts.get(&key).cloned().unwrap_or(StartInfo {
            role: match first.0 {
                Tok::At => Role::Decorator,
                Tok::Else | Tok::Finally | Tok::Try => Role::Clause,
                _ => Role::Statement,
            },
            in_handler: false,
            imports: None,
        });
        let normalized = match (&info.role, info.imports) {
            (Role::Docstring, _) => Vec::new(),
            (_, Some(imports)) => imports,
            _ => {
                let pieces: Vec<Piece<'_>> = pending
                    .iter()
                    .map(|(tok, s, e)| Piece {
                        text: &text[*s..*e],
                        numeric: is_numeric(tok),
                    })
                    .collect();
                vec![join_pieces(&pieces)]
            }
        };
        let last = pending.last().expect("non-empty");
        units.push(Unit {
            first_line: index.line_of(first.1),
            last_line: index.line_of(last.2.saturating_sub(1).max(last.1)),
            role: info.role,
            in_handler: info.in_handler,
            normalized,
        });
        pending.clear();
    };

    for item in lex(text, Mode::Module) {
        let (tok, range) = item.map_err(|e| SourceError::SyntaxInvalid {
            path: path_str.clone(),
            line: index.line_of(e.location.to_usize()),
            message: e.error.to_string(),
        })?;
        let (s, e) = (range.start().to_usize(), range.end().to_usize());
        if is_trivia(&tok) {
            continue;
        }
        if matches!(tok, Tok::Newline | Tok::Semi) {
            flush(&mut pending, &mut units);
            continue;
        }
        let first_line = index.line_of(s);
        let last_line = index.line_of(e.saturating_sub(1).max(s));
        for l in first_line..=last_line {
            has_code[l as usize] = true;
        }
        if matches!(tok, Tok::String { .. }) {
            for l in first_line + 1..=last_line {
                verbatim[l as usize] = true;
            }
        }
        if starts.contains_key(&s) && !pending.is_empty() && !matches!(pending.last(), Some((Tok::At, _, _))) {
            flush(&mut pending, &mut units);
        }
        pending.push((tok, s, e));
    }
    flush(&mut pending, &mut units);

    // Innermost block per line; pre-order makes deeper blocks win.
    let mut owner: Vec<Option<usize>> = vec![None; line_count as usize + 2];
    for (i, b) in raw_blocks.iter().enumerate() {
        for l in b.span.lines() {
            if let Some(slot) = owner.get_mut(l as usize) {
                *slot = Some(i);
            }
        }
    }

    let physical: Vec<&str> = text.lines().collect();
    let mut blocks: Vec<CodeBlock> = raw_blocks
        .iter()
        .map(|b| CodeBlock {
            kind: b.kind,
            name: b.name.clone(),
            parent_chain: b.parent_chain.clone(),
            span: b.span,
            raw_lines: b
                .span
                .lines()
                .filter_map(|l| physical.get(l as usize - 1).map(|s| s.to_string()))
                .collect(),
            normalized_lines: Vec::new(),
            owned_lines: Vec::new(),
            parent: b.parent,
            children: Vec::new(),
            verbatim: b.span.lines().map(|l| verbatim[l as usize]).collect(),
            module_leading: b.module_leading,
        })
        .collect();
    for i in 0..blocks.len() {
        if let Some(p) = blocks[i].parent {
            blocks[p].children.push(i);
        }
    }
    for l in 1..=line_count {
        if let Some(b) = owner[l as usize] {
            blocks[b].owned_lines.push(l);
        }
    }

    let mut tags = vec![LineTag::NonExecutable; line_count as usize];
    let mut statement_spans: Vec<Vec<LineSpan>> = vec![Vec::new(); line_count as usize];
    for unit in &units {
        if let Some(b) = owner.get(unit.first_line as usize).copied().flatten() {
            blocks[b].normalized_lines.extend(unit.normalized.iter().cloned());
        }
        let tag = tag_for(unit.role, unit.in_handler);
        let span = LineSpan {
            start: unit.first_line,
            end: unit.last_line,
        };
        for l in span.lines() {
            if l == 0 || l > line_count || !has_code[l as usize] {
                continue;
            }
            let slot = &mut tags[l as usize - 1];
            *slot = (*slot).max(tag);
            if tag == LineTag::Executable {
                statement_spans[l as usize - 1].push(span);
            }
        }
    }
    let executable_lines: BTreeSet<u32> = tags
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == LineTag::Executable)
        .map(|(i, _)| i as u32 + 1)
        .collect();

    let roots = blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.parent.is_none())
        .map(|(i, _)| i)
        .collect();

    Ok(ParsedSource {
        text: text.to_string(),
        tree: CodeBlockTree {
            source_path: path.to_path_buf(),
            line_count,
            blocks,
            roots,
        },
        classification: LineClassification {
            tags,
            executable_lines,
            statement_spans,
        },
        verbatim: (1..=line_count).map(|l| verbatim[l as usize]).collect(),
    })
}
