//! Symbolic expression trees (genes).
//!
//! A tree is built from the binary operators `+ - * /` over a terminal set of
//! raw feature columns, ephemeral constants and injected abstracted features.
//! Evaluation is total: division is protected and every operator result is
//! clamped so that finite inputs always yield finite outputs.
//!
//! Variable nodes carry the *raw* dataset column index, so a tree evaluates
//! against a full feature row no matter which partition it was evolved in.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Divisors with magnitude at or below this evaluate the quotient to `1.0`.
pub const PROTECTED_DIV_EPS: f64 = 1e-9;
/// Operator results are clamped into `[-OVERFLOW_GUARD, OVERFLOW_GUARD]`.
pub const OVERFLOW_GUARD: f64 = 1e12;
/// Point-selection attempts before a variation operator gives up and returns
/// the unmodified parent.
pub const MAX_VARIATION_RETRIES: usize = 8;
/// Maximum depth of the replacement subtree grown by subtree mutation.
pub const MUTATION_SUBTREE_DEPTH: usize = 4;
/// Gaussian perturbation of a constant, as a fraction of the constant range.
pub const CONSTANT_PERTURBATION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub const ALL: [BinOp; 4] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div];

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "+" => Some(BinOp::Add),
            "-" => Some(BinOp::Sub),
            "*" => Some(BinOp::Mul),
            "/" => Some(BinOp::Div),
            _ => None,
        }
    }

    /// Protected, clamped application of the operator.
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        let v = match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => {
                if b.abs() <= PROTECTED_DIV_EPS {
                    1.0
                } else {
                    a / b
                }
            }
        };
        guard(v)
    }
}

#[inline]
fn guard(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-OVERFLOW_GUARD, OVERFLOW_GUARD)
    }
}

/// A node of an expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Op(BinOp, Box<Node>, Box<Node>),
    /// Raw feature column index.
    Var(usize),
    Const(f64),
    /// Key into the abstraction registry.
    Abstracted(u32),
}

impl Node {
    pub fn op(op: BinOp, left: Node, right: Node) -> Node {
        Node::Op(op, Box::new(left), Box::new(right))
    }

    pub fn add(left: Node, right: Node) -> Node {
        Node::op(BinOp::Add, left, right)
    }

    pub fn sub(left: Node, right: Node) -> Node {
        Node::op(BinOp::Sub, left, right)
    }

    pub fn mul(left: Node, right: Node) -> Node {
        Node::op(BinOp::Mul, left, right)
    }

    pub fn div(left: Node, right: Node) -> Node {
        Node::op(BinOp::Div, left, right)
    }

    pub fn is_leaf(&self) -> bool {
        !matches!(self, Node::Op(..))
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Op(_, l, r) => 1 + l.depth().max(r.depth()),
            _ => 1,
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Node::Op(_, l, r) => 1 + l.node_count() + r.node_count(),
            _ => 1,
        }
    }

    pub fn operator_count(&self) -> usize {
        match self {
            Node::Op(_, l, r) => 1 + l.operator_count() + r.operator_count(),
            _ => 0,
        }
    }

    /// Subtree at preorder position `index` (root is 0).
    pub fn nth(&self, index: usize) -> Option<&Node> {
        fn walk<'a>(node: &'a Node, index: &mut usize) -> Option<&'a Node> {
            if *index == 0 {
                return Some(node);
            }
            *index -= 1;
            if let Node::Op(_, l, r) = node {
                walk(l, index).or_else(|| walk(r, index))
            } else {
                None
            }
        }
        let mut i = index;
        walk(self, &mut i)
    }

    /// Copy of `self` with the subtree at preorder position `index` replaced.
    pub fn with_replaced(&self, index: usize, replacement: Node) -> Node {
        fn walk(node: &Node, index: &mut usize, replacement: &mut Option<Node>) -> Node {
            if *index == 0 {
                *index = usize::MAX;
                return replacement.take().expect("replacement consumed once");
            }
            if *index != usize::MAX {
                *index -= 1;
            }
            match node {
                Node::Op(op, l, r) => {
                    let l = walk(l, index, replacement);
                    let r = walk(r, index, replacement);
                    Node::op(*op, l, r)
                }
                leaf => leaf.clone(),
            }
        }
        let mut i = index;
        let mut slot = Some(replacement);
        walk(self, &mut i, &mut slot)
    }

    fn collect_variables(&self, out: &mut BTreeSet<usize>) {
        match self {
            Node::Op(_, l, r) => {
                l.collect_variables(out);
                r.collect_variables(out);
            }
            Node::Var(i) => {
                out.insert(*i);
            }
            _ => {}
        }
    }

    fn collect_abstractions(&self, out: &mut BTreeSet<u32>) {
        match self {
            Node::Op(_, l, r) => {
                l.collect_abstractions(out);
                r.collect_abstractions(out);
            }
            Node::Abstracted(id) => {
                out.insert(*id);
            }
            _ => {}
        }
    }
}

/// Lookup of abstracted-feature expressions by id.
pub trait Abstractions {
    fn expression(&self, id: u32) -> Option<&ExprTree>;
}

/// Registry with no entries, for trees that never reference abstractions.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAbstractions;

impl Abstractions for NoAbstractions {
    fn expression(&self, _id: u32) -> Option<&ExprTree> {
        None
    }
}

/// An expression tree with cached depth and node count.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprTree {
    root: Node,
    depth: usize,
    node_count: usize,
}

/// Size profile of a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeMetrics {
    pub node_count: usize,
    pub operator_count: usize,
    pub depth: usize,
}

impl From<Node> for ExprTree {
    fn from(root: Node) -> Self {
        ExprTree::new(root)
    }
}

impl ExprTree {
    pub fn new(root: Node) -> Self {
        let depth = root.depth();
        let node_count = root.node_count();
        ExprTree {
            root,
            depth,
            node_count,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn into_root(self) -> Node {
        self.root
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn metrics(&self) -> TreeMetrics {
        TreeMetrics {
            node_count: self.node_count,
            operator_count: self.root.operator_count(),
            depth: self.depth,
        }
    }

    /// Raw feature indices referenced directly by the tree.
    pub fn variables(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.root.collect_variables(&mut out);
        out
    }

    /// Abstraction ids referenced directly by the tree.
    pub fn abstractions(&self) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        self.root.collect_abstractions(&mut out);
        out
    }

    /// Evaluate on one full feature row.
    pub fn evaluate<A: Abstractions + ?Sized>(&self, row: &[f64], registry: &A) -> Result<f64> {
        eval_node(&self.root, row, registry)
    }

    /// Evaluate on column-major data: `columns[i]` holds raw feature `i` for
    /// all `n_rows` samples. Produces exactly the values of [`Self::evaluate`]
    /// applied row by row.
    pub fn evaluate_columns<A: Abstractions + ?Sized>(
        &self,
        columns: &[Vec<f64>],
        n_rows: usize,
        registry: &A,
    ) -> Result<Vec<f64>> {
        eval_columns(&self.root, columns, n_rows, registry)
    }

    /// Replace every abstracted terminal by its registered expression.
    pub fn expand<A: Abstractions + ?Sized>(&self, registry: &A) -> Result<ExprTree> {
        fn walk<A: Abstractions + ?Sized>(node: &Node, registry: &A) -> Result<Node> {
            Ok(match node {
                Node::Op(op, l, r) => Node::op(*op, walk(l, registry)?, walk(r, registry)?),
                Node::Abstracted(id) => {
                    let expr = registry.expression(*id).ok_or_else(|| unresolved(*id))?;
                    walk(expr.root(), registry)?
                }
                leaf => leaf.clone(),
            })
        }
        Ok(ExprTree::new(walk(&self.root, registry)?))
    }

    /// Fully parenthesized infix text. Abstracted terminals print as `z<id>`.
    pub fn to_infix(&self, names: &[String]) -> Result<String> {
        let mut out = String::new();
        write_infix(&self.root, names, &mut out)?;
        Ok(out)
    }

    /// Infix text followed by one `where z<k> = ...` line per referenced
    /// abstraction.
    pub fn to_infix_with_expansions<A: Abstractions + ?Sized>(
        &self,
        names: &[String],
        registry: &A,
    ) -> Result<String> {
        let mut out = self.to_infix(names)?;
        for id in self.abstractions() {
            let expr = registry.expression(id).ok_or_else(|| unresolved(id))?;
            out.push_str(&format!("\n  where z{id} = {}", expr.to_infix(names)?));
        }
        Ok(out)
    }

    /// Parse text produced by [`Self::to_infix`]. Feature names take
    /// precedence over the `z<k>` abstraction pattern.
    pub fn parse(text: &str, names: &[String]) -> Result<ExprTree> {
        let tokens = tokenize(text);
        let mut pos = 0;
        let root = parse_node(&tokens, &mut pos, names)?;
        if pos != tokens.len() {
            return Err(Error::Structural(format!(
                "trailing input after expression: {:?}",
                &tokens[pos..]
            )));
        }
        Ok(ExprTree::new(root))
    }
}

fn unresolved(id: u32) -> Error {
    Error::Structural(format!("unresolved abstraction id z{id}"))
}

fn eval_node<A: Abstractions + ?Sized>(node: &Node, row: &[f64], registry: &A) -> Result<f64> {
    Ok(match node {
        Node::Op(op, l, r) => op.apply(eval_node(l, row, registry)?, eval_node(r, row, registry)?),
        Node::Var(i) => *row
            .get(*i)
            .ok_or_else(|| Error::Input(format!("feature index {i} outside row of length {}", row.len())))?,
        Node::Const(c) => *c,
        Node::Abstracted(id) => {
            let expr = registry.expression(*id).ok_or_else(|| unresolved(*id))?;
            eval_node(expr.root(), row, registry)?
        }
    })
}

fn eval_columns<A: Abstractions + ?Sized>(
    node: &Node,
    columns: &[Vec<f64>],
    n_rows: usize,
    registry: &A,
) -> Result<Vec<f64>> {
    Ok(match node {
        Node::Op(op, l, r) => {
            let mut a = eval_columns(l, columns, n_rows, registry)?;
            let b = eval_columns(r, columns, n_rows, registry)?;
            for (x, y) in a.iter_mut().zip(&b) {
                *x = op.apply(*x, *y);
            }
            a
        }
        Node::Var(i) => {
            let col = columns.get(*i).ok_or_else(|| {
                Error::Input(format!("feature index {i} outside {} columns", columns.len()))
            })?;
            col[..n_rows].to_vec()
        }
        Node::Const(c) => vec![*c; n_rows],
        Node::Abstracted(id) => {
            let expr = registry.expression(*id).ok_or_else(|| unresolved(*id))?;
            eval_columns(expr.root(), columns, n_rows, registry)?
        }
    })
}

fn write_infix(node: &Node, names: &[String], out: &mut String) -> Result<()> {
    match node {
        Node::Op(op, l, r) => {
            out.push('(');
            write_infix(l, names, out)?;
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            write_infix(r, names, out)?;
            out.push(')');
        }
        Node::Var(i) => {
            let name = names
                .get(*i)
                .ok_or_else(|| Error::Structural(format!("unknown feature index {i}")))?;
            out.push_str(name);
        }
        // `Display` for f64 is the shortest text that parses back exactly.
        Node::Const(c) => out.push_str(&c.to_string()),
        Node::Abstracted(id) => out.push_str(&format!("z{id}")),
    }
    Ok(())
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            c => current.push(c),
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn parse_node(tokens: &[String], pos: &mut usize, names: &[String]) -> Result<Node> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| Error::Structural("unexpected end of expression".into()))?;
    *pos += 1;
    if tok == "(" {
        let left = parse_node(tokens, pos, names)?;
        let op_tok = tokens
            .get(*pos)
            .ok_or_else(|| Error::Structural("missing operator".into()))?;
        let op = BinOp::from_symbol(op_tok)
            .ok_or_else(|| Error::Structural(format!("expected operator, found {op_tok:?}")))?;
        *pos += 1;
        let right = parse_node(tokens, pos, names)?;
        match tokens.get(*pos).map(String::as_str) {
            Some(")") => *pos += 1,
            other => {
                return Err(Error::Structural(format!("expected ')', found {other:?}")));
            }
        }
        return Ok(Node::op(op, left, right));
    }
    if let Some(i) = names.iter().position(|n| n == tok) {
        return Ok(Node::Var(i));
    }
    if let Some(id) = tok.strip_prefix('z').and_then(|d| d.parse::<u32>().ok()) {
        return Ok(Node::Abstracted(id));
    }
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Node::Const)
        .ok_or_else(|| Error::Structural(format!("unknown token {tok:?}")))
}

/// Canonical feature names `x0, x1, ...` used when a tree is persisted
/// without a schema.
pub fn canonical_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

const PERSISTED_NAME_COUNT: usize = 64;

impl Serialize for ExprTree {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let names = canonical_names(
            self.variables()
                .last()
                .map_or(0, |&m| m + 1)
                .max(PERSISTED_NAME_COUNT),
        );
        let text = self.to_infix(&names).map_err(serde::ser::Error::custom)?;
        serializer.serialize_str(&text)
    }
}

impl<'de> Deserialize<'de> for ExprTree {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let width = text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter_map(|t| t.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()))
            .max()
            .map_or(0, |m| m + 1)
            .max(PERSISTED_NAME_COUNT);
        ExprTree::parse(&text, &canonical_names(width)).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.variables().last().map_or(0, |&m| m + 1);
        match self.to_infix(&canonical_names(width)) {
            Ok(s) => f.write_str(&s),
            Err(_) => Err(fmt::Error),
        }
    }
}

/// Terminals available to one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSet {
    /// Raw feature column indices, unique.
    pub variables: Vec<usize>,
    /// Injected abstraction ids.
    pub abstractions: Vec<u32>,
    pub constant_range: (f64, f64),
}

impl TerminalSet {
    pub fn new(variables: Vec<usize>, constant_range: (f64, f64)) -> Result<Self> {
        let set = TerminalSet {
            variables,
            abstractions: Vec::new(),
            constant_range,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() && self.abstractions.is_empty() {
            return Err(Error::Config("terminal set has no variables".into()));
        }
        let unique: BTreeSet<_> = self.variables.iter().collect();
        if unique.len() != self.variables.len() {
            return Err(Error::Config("terminal set variables are not unique".into()));
        }
        let (lo, hi) = self.constant_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid constant range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Number of distinct terminal choices: each variable, each abstraction,
    /// and one ephemeral-constant slot.
    pub fn choice_count(&self) -> usize {
        self.variables.len() + self.abstractions.len() + 1
    }

    fn random_constant<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.constant_range;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    fn random_terminal<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        let pick = rng.random_range(0..self.choice_count());
        if pick < self.variables.len() {
            Node::Var(self.variables[pick])
        } else if pick < self.variables.len() + self.abstractions.len() {
            Node::Abstracted(self.abstractions[pick - self.variables.len()])
        } else {
            Node::Const(self.random_constant(rng))
        }
    }
}

fn random_op<R: Rng + ?Sized>(rng: &mut R) -> BinOp {
    BinOp::ALL[rng.random_range(0..BinOp::ALL.len())]
}

fn check_init(terminals: &TerminalSet, max_depth: usize) -> Result<()> {
    terminals.validate()?;
    if max_depth == 0 {
        return Err(Error::Config("max_depth must be at least 1".into()));
    }
    Ok(())
}

/// Grow method: every node below the depth limit is drawn uniformly from the
/// union of functions and terminals.
pub fn grow_init<R: Rng + ?Sized>(terminals: &TerminalSet, max_depth: usize, rng: &mut R) -> Result<ExprTree> {
    check_init(terminals, max_depth)?;
    fn grow<R: Rng + ?Sized>(t: &TerminalSet, level: usize, max_depth: usize, rng: &mut R) -> Node {
        if level >= max_depth {
            return t.random_terminal(rng);
        }
        let n_ops = BinOp::ALL.len();
        if rng.random_range(0..n_ops + t.choice_count()) < n_ops {
            let op = random_op(rng);
            let l = grow(t, level + 1, max_depth, rng);
            let r = grow(t, level + 1, max_depth, rng);
            Node::op(op, l, r)
        } else {
            t.random_terminal(rng)
        }
    }
    Ok(ExprTree::new(grow(terminals, 1, max_depth, rng)))
}

/// Full method: functions everywhere above `max_depth`, terminals exactly at it.
pub fn full_init<R: Rng + ?Sized>(terminals: &TerminalSet, max_depth: usize, rng: &mut R) -> Result<ExprTree> {
    check_init(terminals, max_depth)?;
    fn full<R: Rng + ?Sized>(t: &TerminalSet, level: usize, max_depth: usize, rng: &mut R) -> Node {
        if level >= max_depth {
            return t.random_terminal(rng);
        }
        let op = random_op(rng);
        let l = full(t, level + 1, max_depth, rng);
        let r = full(t, level + 1, max_depth, rng);
        Node::op(op, l, r)
    }
    Ok(ExprTree::new(full(terminals, 1, max_depth, rng)))
}

/// Ramped half-and-half: each tree gets a depth drawn uniformly from
/// `depth_range` (capped at `max_depth`); even positions use grow, odd
/// positions use full.
pub fn ramped_half_and_half<R: Rng + ?Sized>(
    count: usize,
    terminals: &TerminalSet,
    depth_range: (usize, usize),
    max_depth: usize,
    rng: &mut R,
) -> Result<Vec<ExprTree>> {
    let (lo, hi) = depth_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("invalid ramp range [{lo}, {hi}]")));
    }
    (0..count)
        .map(|i| {
            let depth = rng.random_range(lo..=hi).min(max_depth);
            if i % 2 == 0 {
                grow_init(terminals, depth, rng)
            } else {
                full_init(terminals, depth, rng)
            }
        })
        .collect()
}

/// Swap uniformly chosen subtrees of `a` and `b`. If either child would
/// exceed `max_depth` the choice is redrawn; after
/// [`MAX_VARIATION_RETRIES`] failures the parents are returned unchanged.
pub fn subtree_crossover<R: Rng + ?Sized>(
    a: &ExprTree,
    b: &ExprTree,
    max_depth: usize,
    rng: &mut R,
) -> (ExprTree, ExprTree) {
    for _ in 0..MAX_VARIATION_RETRIES {
        let ia = rng.random_range(0..a.node_count());
        let ib = rng.random_range(0..b.node_count());
        let sa = a.root.nth(ia).expect("index within node count").clone();
        let sb = b.root.nth(ib).expect("index within node count").clone();
        let ca = ExprTree::new(a.root.with_replaced(ia, sb));
        let cb = ExprTree::new(b.root.with_replaced(ib, sa));
        if ca.depth <= max_depth && cb.depth <= max_depth {
            return (ca, cb);
        }
    }
    (a.clone(), b.clone())
}

/// Replace a uniformly chosen node by a freshly grown subtree. When the chosen
/// node is a constant, half of the time it is instead perturbed by Gaussian
/// noise and clamped back into the constant range.
pub fn subtree_mutation<R: Rng + ?Sized>(
    a: &ExprTree,
    terminals: &TerminalSet,
    max_depth: usize,
    rng: &mut R,
) -> ExprTree {
    let (lo, hi) = terminals.constant_range;
    let sd = CONSTANT_PERTURBATION * (hi - lo);
    for _ in 0..MAX_VARIATION_RETRIES {
        let idx = rng.random_range(0..a.node_count());
        let target = a.root.nth(idx).expect("index within node count");
        let replacement = match target {
            Node::Const(c) if sd > 0.0 && rng.random_bool(0.5) => {
                let noise = Normal::new(0.0, sd).expect("positive sd").sample(rng);
                Node::Const((c + noise).clamp(lo, hi))
            }
            _ => match grow_init(terminals, MUTATION_SUBTREE_DEPTH.min(max_depth.max(1)), rng) {
                Ok(t) => t.root,
                Err(_) => return a.clone(),
            },
        };
        let child = ExprTree::new(a.root.with_replaced(idx, replacement));
        if child.depth <= max_depth {
            return child;
        }
    }
    a.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn terms(n: usize) -> TerminalSet {
        TerminalSet::new((0..n).collect(), (-10.0, 10.0)).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        canonical_names(n)
    }

    /// Independent recursive counter used as the traversal oracle.
    fn count_oracle(node: &Node) -> (usize, usize, usize) {
        match node {
            Node::Op(_, l, r) => {
                let (n1, o1, d1) = count_oracle(l);
                let (n2, o2, d2) = count_oracle(r);
                (n1 + n2 + 1, o1 + o2 + 1, d1.max(d2) + 1)
            }
            _ => (1, 0, 1),
        }
    }

    fn leaf_depths(node: &Node, level: usize, out: &mut Vec<usize>) {
        match node {
            Node::Op(_, l, r) => {
                leaf_depths(l, level + 1, out);
                leaf_depths(r, level + 1, out);
            }
            _ => out.push(level),
        }
    }

    #[test]
    fn constant_evaluates_to_itself() {
        let t = ExprTree::new(Node::Const(3.5));
        assert_eq!(t.evaluate(&[7.0], &NoAbstractions).unwrap(), 3.5);
    }

    #[test]
    fn protected_division_returns_one() {
        let t = ExprTree::new(Node::div(Node::Const(1.0), Node::Const(0.0)));
        assert_eq!(t.evaluate(&[], &NoAbstractions).unwrap(), 1.0);
        let t = ExprTree::new(Node::div(Node::Const(5.0), Node::Const(1e-10)));
        assert_eq!(t.evaluate(&[], &NoAbstractions).unwrap(), 1.0);
    }

    #[test]
    fn hand_evaluated_expression() {
        let t = ExprTree::new(Node::add(Node::Var(0), Node::mul(Node::Var(1), Node::Const(2.0))));
        assert_eq!(t.evaluate(&[1.5, 2.0], &NoAbstractions).unwrap(), 5.5);
    }

    #[test]
    fn overflow_is_clamped() {
        let big = Node::mul(Node::Const(1e10), Node::Const(1e10));
        let t = ExprTree::new(Node::mul(big.clone(), big));
        assert_eq!(t.evaluate(&[], &NoAbstractions).unwrap(), OVERFLOW_GUARD);
    }

    #[test]
    fn unresolved_abstraction_is_structural_error() {
        let t = ExprTree::new(Node::Abstracted(4));
        assert!(matches!(t.evaluate(&[], &NoAbstractions), Err(Error::Structural(_))));
    }

    #[test]
    fn full_depth_one_is_a_terminal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = full_init(&terms(3), 1, &mut rng).unwrap();
        assert!(t.root().is_leaf());
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn full_places_all_leaves_at_max_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = full_init(&terms(3), 3, &mut rng).unwrap();
            let mut depths = Vec::new();
            leaf_depths(t.root(), 1, &mut depths);
            assert!(depths.iter().all(|&d| d == 3));
        }
    }

    #[test]
    fn grow_is_seed_deterministic_and_bounded() {
        let a = grow_init(&terms(4), 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = grow_init(&terms(4), 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!((1..=5).contains(&a.depth()));
    }

    #[test]
    fn empty_terminal_set_is_config_error() {
        let t = TerminalSet {
            variables: vec![],
            abstractions: vec![],
            constant_range: (-1.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(grow_init(&t, 3, &mut rng), Err(Error::Config(_))));
        assert!(matches!(full_init(&t, 3, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn crossover_of_leaves_swaps_them() {
        let a = ExprTree::new(Node::Var(0));
        let b = ExprTree::new(Node::Const(2.0));
        let (ca, cb) = subtree_crossover(&a, &b, 15, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(ca, b);
        assert_eq!(cb, a);
    }

    #[test]
    fn crossover_falls_back_to_parents_when_too_deep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = full_init(&terms(2), 4, &mut rng).unwrap();
        let b = full_init(&terms(2), 4, &mut rng).unwrap();
        // Any non-root exchange between two depth-4 full trees yields depth >= 4,
        // and every exchange except leaf-for-leaf exceeds 4; force the limit below.
        let (ca, cb) = subtree_crossover(&a, &b, 3, &mut rng);
        assert_eq!((ca, cb), (a, b));
    }

    #[test]
    fn mutation_of_leaf_yields_bounded_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = ExprTree::new(Node::Var(1));
        for _ in 0..100 {
            let m = subtree_mutation(&t, &terms(3), 15, &mut rng);
            assert!(m.depth() <= MUTATION_SUBTREE_DEPTH);
        }
    }

    #[test]
    fn constant_perturbation_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = ExprTree::new(Node::Const(9.99));
        for _ in 0..500 {
            let m = subtree_mutation(&t, &terms(1), 15, &mut rng);
            if let Node::Const(c) = m.root() {
                assert!((-10.0..=10.0).contains(c));
            }
        }
    }

    #[test]
    fn metrics_of_small_trees() {
        let c = ExprTree::new(Node::Const(1.0)).metrics();
        assert_eq!((c.node_count, c.operator_count, c.depth), (1, 0, 1));
        let s = ExprTree::new(Node::add(Node::Var(0), Node::Var(1))).metrics();
        assert_eq!((s.node_count, s.operator_count, s.depth), (3, 1, 2));
    }

    #[test]
    fn serialize_examples() {
        let t = ExprTree::new(Node::add(Node::Var(0), Node::Const(2.0)));
        assert_eq!(t.to_infix(&["fc".to_string()]).unwrap(), "(fc + 2)");
        let z = ExprTree::new(Node::Abstracted(3));
        assert_eq!(z.to_infix(&[]).unwrap(), "z3");
        let bad = ExprTree::new(Node::Var(5));
        assert!(matches!(bad.to_infix(&names(2)), Err(Error::Structural(_))));
    }

    #[test]
    fn expansion_footnote_lists_abstractions() {
        struct One(ExprTree);
        impl Abstractions for One {
            fn expression(&self, id: u32) -> Option<&ExprTree> {
                (id == 3).then_some(&self.0)
            }
        }
        let reg = One(ExprTree::new(Node::mul(Node::Const(2.0), Node::Var(0))));
        let t = ExprTree::new(Node::sub(Node::Abstracted(3), Node::Var(1)));
        let text = t.to_infix_with_expansions(&names(2), &reg).unwrap();
        assert_eq!(text, "(z3 - x1)\n  where z3 = (2 * x0)");
        let expanded = t.expand(&reg).unwrap();
        assert!(expanded.abstractions().is_empty());
        let row = [1.25, -3.0];
        assert_eq!(expanded.evaluate(&row, &reg).unwrap(), t.evaluate(&row, &reg).unwrap());
    }

    #[test]
    fn negative_constants_round_trip() {
        let t = ExprTree::new(Node::sub(Node::Var(0), Node::Const(-3.25e-7)));
        let s = t.to_infix(&names(1)).unwrap();
        assert_eq!(ExprTree::parse(&s, &names(1)).unwrap(), t);
    }

    #[test]
    fn random_trees_round_trip_through_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut set = terms(5);
        set.abstractions = vec![0, 7];
        for i in 0..1000 {
            let t = grow_init(&set, 2 + i % 6, &mut rng).unwrap();
            let s = t.to_infix(&names(5)).unwrap();
            assert_eq!(ExprTree::parse(&s, &names(5)).unwrap(), t, "{s}");
        }
    }

    #[test]
    fn serde_round_trip() {
        let t = ExprTree::new(Node::div(Node::Var(70), Node::Abstracted(2)));
        let json = serde_json::to_string(&t).unwrap();
        let back: ExprTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ten_thousand_crossovers_respect_depth_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let set = terms(4);
        let mut pool = ramped_half_and_half(50, &set, (2, 6), 15, &mut rng).unwrap();
        for _ in 0..10_000 {
            let i = rng.random_range(0..pool.len());
            let j = rng.random_range(0..pool.len());
            let (a, b) = subtree_crossover(&pool[i], &pool[j], 15, &mut rng);
            assert!(a.depth() <= 15 && b.depth() <= 15);
            pool[i] = a;
            pool[j] = b;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cached_metrics_match_traversal(seed in any::<u64>(), depth in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = grow_init(&terms(3), depth, &mut rng).unwrap();
            let (n, o, d) = count_oracle(t.root());
            let m = t.metrics();
            prop_assert_eq!((m.node_count, m.operator_count, m.depth), (n, o, d));
        }

        #[test]
        fn evaluation_is_total_and_batch_consistent(
            seed in any::<u64>(),
            rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 3), 1..8),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = grow_init(&terms(3), 7, &mut rng).unwrap();
            let columns: Vec<Vec<f64>> = (0..3).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
            let batch = t.evaluate_columns(&columns, rows.len(), &NoAbstractions).unwrap();
            for (row, b) in rows.iter().zip(&batch) {
                let v = t.evaluate(row, &NoAbstractions).unwrap();
                prop_assert!(v.is_finite());
                prop_assert_eq!(v.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn operators_preserve_depth_and_inputs(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = terms(3);
            let a = grow_init(&set, 6, &mut rng).unwrap();
            let b = full_init(&set, 5, &mut rng).unwrap();
            let (a0, b0) = (a.clone(), b.clone());
            let (c, d) = subtree_crossover(&a, &b, 8, &mut rng);
            let m = subtree_mutation(&a, &set, 8, &mut rng);
            prop_assert!(c.depth() <= 8 && d.depth() <= 8 && m.depth() <= 8);
            prop_assert_eq!(a, a0);
            prop_assert_eq!(b, b0);
        }
    }
}
