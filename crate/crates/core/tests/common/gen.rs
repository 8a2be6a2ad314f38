//! Seeded generator of small Python programs plus a direct existence oracle
//! that works on the generator's own model and never looks at source text.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

const MODULES: [&str; 5] = ["os", "re", "sys", "json", "math"];
const DECORATORS: [&str; 3] = ["staticmethod", "cache", "wraps"];
const BASES: [&str; 3] = ["Base", "dict", "Mixin"];
const PARAMS: [&[&str]; 4] = [&[], &["a"], &["a", "b"], &["self", "a", "b"]];

#[derive(Clone, Debug, PartialEq)]
pub enum Stmt {
    Import(Vec<&'static str>),
    Assign { target: u8, source: u8, op: char, k: u8 },
    Return(u8),
    Call(Vec<u8>),
    /// Assignment of a multi-line string whose continuation lines start at
    /// column 0 regardless of indentation.
    Text(u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Func {
    pub name: String,
    pub params: &'static [&'static str],
    pub decorator: Option<&'static str>,
    pub body: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Class {
    pub name: String,
    pub base: Option<&'static str>,
    pub body: Vec<Node>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Stmt(Stmt),
    Func(Func),
    Class(Class),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Module {
    pub items: Vec<Node>,
}

#[derive(Clone, Copy, Debug)]
pub struct Style {
    pub indent: usize,
    /// Break after every comma inside brackets.
    pub reflow: bool,
    /// One import per statement instead of combined imports.
    pub split_imports: bool,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            indent: 4,
            reflow: false,
            split_imports: false,
        }
    }
}

// ---- generation ----

fn var<R: Rng>(rng: &mut R) -> u8 {
    rng.gen_range(0..6)
}

fn stmt<R: Rng>(rng: &mut R, in_function: bool) -> Stmt {
    let pick = rng.gen_range(0..if in_function { 10 } else { 8 });
    match pick {
        0..=3 => Stmt::Assign {
            target: var(rng),
            source: var(rng),
            op: *['+', '-', '*'].choose(rng).unwrap(),
            k: rng.gen_range(0..4),
        },
        4..=5 => Stmt::Call((0..rng.gen_range(1..4)).map(|_| var(rng)).collect()),
        6 => Stmt::Text(rng.gen_range(0..3)),
        7 => {
            let n = rng.gen_range(1..3);
            let mut mods: Vec<&'static str> = MODULES.choose_multiple(rng, n).copied().collect();
            mods.sort();
            Stmt::Import(mods)
        }
        _ => Stmt::Return(var(rng)),
    }
}

fn func<R: Rng>(rng: &mut R, prefix: &str, depth: usize) -> Func {
    let mut body = Vec::new();
    for _ in 0..rng.gen_range(1..5) {
        if depth < 2 && rng.gen_bool(0.12) {
            body.push(Node::Func(func(rng, "g", depth + 1)));
        } else {
            body.push(Node::Stmt(stmt(rng, true)));
        }
    }
    Func {
        name: format!("{prefix}{}", rng.gen_range(0..4)),
        params: PARAMS.choose(rng).unwrap(),
        decorator: rng.gen_bool(0.2).then(|| *DECORATORS.choose(rng).unwrap()),
        body,
    }
}

fn class<R: Rng>(rng: &mut R) -> Class {
    let mut body = Vec::new();
    for _ in 0..rng.gen_range(1..5) {
        if rng.gen_bool(0.6) {
            body.push(Node::Func(func(rng, "m", 1)));
        } else {
            let s = loop {
                let s = stmt(rng, false);
                if !matches!(s, Stmt::Import(_)) {
                    break s;
                }
            };
            body.push(Node::Stmt(s));
        }
    }
    Class {
        name: format!("C{}", rng.gen_range(0..3)),
        base: rng.gen_bool(0.5).then(|| *BASES.choose(rng).unwrap()),
        body,
    }
}

fn item<R: Rng>(rng: &mut R) -> Node {
    match rng.gen_range(0..10) {
        0..=2 => Node::Stmt(stmt(rng, false)),
        3..=6 => Node::Func(func(rng, "f", 0)),
        _ => Node::Class(class(rng)),
    }
}

pub fn repo<R: Rng>(rng: &mut R) -> Vec<Module> {
    (0..rng.gen_range(2..5))
        .map(|_| Module {
            items: (0..rng.gen_range(3..9)).map(|_| item(rng)).collect(),
        })
        .collect()
}

fn mutate_body<R: Rng>(rng: &mut R, body: &mut Vec<Node>, in_function: bool) {
    if body.len() > 1 && rng.gen_bool(0.3) {
        body.remove(rng.gen_range(0..body.len()));
    }
    if rng.gen_bool(0.3) {
        let s = if in_function {
            stmt(rng, true)
        } else {
            Stmt::Assign {
                target: var(rng),
                source: var(rng),
                op: '-',
                k: rng.gen_range(0..4),
            }
        };
        body.insert(rng.gen_range(0..=body.len()), Node::Stmt(s));
    }
    for node in body.iter_mut() {
        mutate_node(rng, node);
    }
}

fn mutate_node<R: Rng>(rng: &mut R, node: &mut Node) {
    match node {
        Node::Stmt(_) => {}
        Node::Func(f) => {
            if rng.gen_bool(0.08) {
                f.name = format!("fab{}", rng.gen_range(0..3));
            }
            mutate_body(rng, &mut f.body, true);
        }
        Node::Class(c) => mutate_body(rng, &mut c.body, false),
    }
}

/// A gist drawn from `repo`: copied definitions, edited, plus some
/// fabricated ones. At most `max_lines` lines when rendered.
pub fn gist<R: Rng>(rng: &mut R, repo: &[Module], max_lines: usize) -> Module {
    let pool: Vec<&Node> = repo.iter().flat_map(|m| &m.items).collect();
    let mut items = Vec::new();
    for _ in 0..rng.gen_range(3..9) {
        let mut node = (*pool.choose(rng).unwrap()).clone();
        mutate_node(rng, &mut node);
        items.push(node);
    }
    for _ in 0..rng.gen_range(0..3) {
        items.insert(rng.gen_range(0..=items.len()), item(rng));
    }
    let mut module = Module { items };
    while render(&module, Style::default()).lines().count() > max_lines && module.items.len() > 1 {
        module.items.pop();
    }
    module
}

// ---- rendering ----

fn comma_list(parts: &[String], style: Style, cont: &str) -> String {
    let sep = if style.reflow { format!(",\n{cont}") } else { ", ".to_string() };
    parts.join(&sep)
}

fn render_stmt(out: &mut Vec<String>, s: &Stmt, pad: &str, style: Style) {
    let cont = format!("{pad}        ");
    match s {
        Stmt::Import(mods) => {
            if style.split_imports {
                out.extend(mods.iter().map(|m| format!("{pad}import {m}")));
            } else {
                out.push(format!("{pad}import {}", mods.join(", ")));
            }
        }
        Stmt::Assign { target, source, op, k } => out.push(format!("{pad}v{target} = v{source} {op} {k}")),
        Stmt::Return(v) => out.push(format!("{pad}return v{v}")),
        Stmt::Call(args) => {
            let args: Vec<String> = args.iter().map(|a| format!("v{a}")).collect();
            let text = format!("{pad}print({})", comma_list(&args, style, &cont));
            out.extend(text.lines().map(str::to_string));
        }
        Stmt::Text(k) => {
            out.push(format!("{pad}t{k} = \"\"\"head"));
            out.push(format!("  body {k}"));
            out.push("tail\"\"\"".to_string());
        }
    }
}

fn render_nodes(out: &mut Vec<String>, nodes: &[Node], level: usize, style: Style) {
    let pad = " ".repeat(level * style.indent);
    for (i, node) in nodes.iter().enumerate() {
        match node {
            Node::Stmt(s) => render_stmt(out, s, &pad, style),
            Node::Func(f) => {
                if i > 0 {
                    out.push(String::new());
                }
                if let Some(d) = f.decorator {
                    out.push(format!("{pad}@{d}"));
                }
                let params: Vec<String> = f.params.iter().map(|p| p.to_string()).collect();
                let header = format!("{pad}def {}({}):", f.name, comma_list(&params, style, &format!("{pad}        ")));
                out.extend(header.lines().map(str::to_string));
                render_nodes(out, &f.body, level + 1, style);
            }
            Node::Class(c) => {
                if i > 0 {
                    out.push(String::new());
                }
                match c.base {
                    Some(b) => out.push(format!("{pad}class {}({b}):", c.name)),
                    None => out.push(format!("{pad}class {}:", c.name)),
                }
                render_nodes(out, &c.body, level + 1, style);
            }
        }
    }
}

pub fn render(module: &Module, style: Style) -> String {
    let mut out = Vec::new();
    render_nodes(&mut out, &module.items, 0, style);
    let mut text = out.join("\n");
    text.push('\n');
    text
}

// ---- oracle ----

/// A block as the oracle sees it: `(kind, name, chain)` or `None` for
/// module-level statements, plus one id per logical line.
#[derive(Clone, Debug)]
pub struct OracleBlock {
    pub key: Option<(char, String, Vec<String>)>,
    pub lines: Vec<String>,
}

fn stmt_ids(s: &Stmt) -> Vec<String> {
    match s {
        Stmt::Import(mods) => mods.iter().map(|m| format!("import:{m}")).collect(),
        other => vec![format!("{other:?}")],
    }
}

fn flatten_into(out: &mut Vec<OracleBlock>, nodes: &[Node], chain: &[String], owner: Option<usize>) {
    for node in nodes {
        match node {
            Node::Stmt(s) => match owner {
                Some(o) => out[o].lines.extend(stmt_ids(s)),
                None => out.push(OracleBlock {
                    key: None,
                    lines: stmt_ids(s),
                }),
            },
            Node::Func(f) => {
                let mut lines = Vec::new();
                if let Some(d) = f.decorator {
                    lines.push(format!("@{d}"));
                }
                lines.push(format!("def {}({:?})", f.name, f.params));
                out.push(OracleBlock {
                    key: Some(('f', f.name.clone(), chain.to_vec())),
                    lines,
                });
                let idx = out.len() - 1;
                let mut inner = chain.to_vec();
                inner.push(f.name.clone());
                flatten_into(out, &f.body, &inner, Some(idx));
            }
            Node::Class(c) => {
                out.push(OracleBlock {
                    key: Some(('c', c.name.clone(), chain.to_vec())),
                    lines: vec![format!("class {}({:?})", c.name, c.base)],
                });
                let idx = out.len() - 1;
                let mut inner = chain.to_vec();
                inner.push(c.name.clone());
                flatten_into(out, &c.body, &inner, Some(idx));
            }
        }
    }
}

pub fn flatten(module: &Module) -> Vec<OracleBlock> {
    let mut out = Vec::new();
    flatten_into(&mut out, &module.items, &[], None);
    out
}

/// `(matched, total)` by exhaustive comparison against every repository block.
pub fn oracle_existence(repo: &[Module], gist: &Module) -> (usize, usize) {
    let repo_blocks: Vec<OracleBlock> = repo.iter().flat_map(flatten).collect();
    let toplevel: HashSet<&String> = repo_blocks
        .iter()
        .filter(|b| b.key.is_none())
        .flat_map(|b| &b.lines)
        .collect();
    let mut matched = 0;
    let mut total = 0;
    for block in flatten(gist) {
        total += block.lines.len();
        matched += match &block.key {
            None => block.lines.iter().filter(|l| toplevel.contains(l)).count(),
            Some(key) => repo_blocks
                .iter()
                .filter(|c| c.key.as_ref() == Some(key))
                .map(|c| block.lines.iter().filter(|l| c.lines.contains(l)).count())
                .max()
                .unwrap_or(0),
        };
    }
    (matched, total)
}

/// Repository as `(relative path, text)` pairs.
pub fn sources(repo: &[Module], style: Style) -> Vec<(String, String)> {
    repo.iter()
        .enumerate()
        .map(|(i, m)| (format!("pkg/mod{i}.py"), render(m, style)))
        .collect()
}

/// Qualified name of the first function in a module, e.g. `C1::m0`.
pub fn first_function(module: &Module) -> Option<String> {
    module.items.iter().find_map(|n| match n {
        Node::Func(f) => Some(f.name.clone()),
        Node::Class(c) => c.body.iter().find_map(|n| match n {
            Node::Func(f) => Some(format!("{}::{}", c.name, f.name)),
            _ => None,
        }),
        _ => None,
    })
}
