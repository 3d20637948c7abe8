//! Expression trees, their construction rules, and kernel containers.
//!
//! Expressions are built from indexed tensor accesses with `*` and `+`.
//! Whenever an operator combines two operands, one of four actions keeps
//! the tree shallow: children of equal node type are merged, so an
//! Einsum node never has an Einsum child and an Add node never has an
//! Add child. Scalars met in a `*` chain are folded into a single
//! multiplier hoisted above the Einsum. Distributive laws are never
//! applied: in `A * (B + C)` the addition is evaluated first.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add as OpAdd, Mul as OpMul};

use crate::index::{letter_rank, IndexString, Letter};
use crate::layout::LayoutPolicy;
use crate::logmap::LogDescriptor;
use crate::pattern::SparsityPattern;
use crate::tensor::{naive_einsum, Tensor};

/// A scalar multiplier: an eagerly folded literal times an ordered
/// product of symbolic scalars bound at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCoeff {
    pub literal: f64,
    pub symbols: Vec<String>,
}

impl ScalarCoeff {
    pub fn one() -> Self {
        ScalarCoeff { literal: 1.0, symbols: Vec::new() }
    }

    pub fn literal(v: f64) -> Self {
        ScalarCoeff { literal: v, symbols: Vec::new() }
    }

    pub fn symbol(name: &str) -> Self {
        ScalarCoeff { literal: 1.0, symbols: vec![name.to_owned()] }
    }

    pub fn is_one(&self) -> bool {
        self.literal == 1.0 && self.symbols.is_empty()
    }

    pub fn times(&self, other: &ScalarCoeff) -> ScalarCoeff {
        let mut symbols = self.symbols.clone();
        symbols.extend(other.symbols.iter().cloned());
        ScalarCoeff { literal: self.literal * other.literal, symbols }
    }

    /// Resolves the coefficient against bound scalar values.
    pub fn resolve(&self, scalars: &BTreeMap<String, f64>) -> Option<f64> {
        let mut v = self.literal;
        for s in &self.symbols {
            v *= scalars.get(s)?;
        }
        Some(v)
    }
}

impl fmt::Display for ScalarCoeff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.symbols.is_empty() {
            return write!(f, "{}", self.literal);
        }
        if self.literal != 1.0 {
            write!(f, "{} * ", self.literal)?;
        }
        write!(f, "{}", self.symbols.join(" * "))
    }
}

/// One node of an expression tree, annotated with its result index
/// string and, once computed, its sparsity pattern and equivalent
/// sparsity pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub indices: IndexString,
    pub spp: Option<SparsityPattern>,
    pub eqspp: Option<SparsityPattern>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// A tensor access; `indices` is the access string.
    Leaf { tensor: String },
    ScalarMul { coeff: ScalarCoeff, child: Box<Node> },
    Add { children: Vec<Node> },
    Einsum { children: Vec<Node> },
    /// Marks a child whose letter order differs from the context order.
    Permute { child: Box<Node> },
    /// Binary multiplication formula (after strength reduction).
    Product { left: Box<Node>, right: Box<Node> },
    /// Summation formula over one letter (after strength reduction).
    IndexSum { letter: Letter, child: Box<Node> },
    /// IndexSum-over-Product runs mapped to a loop-over-GEMM.
    Contraction {
        left: Box<Node>,
        right: Box<Node>,
        summed: Vec<Letter>,
        log: Option<LogDescriptor>,
    },
}

impl Node {
    pub fn leaf(tensor: &str, indices: IndexString) -> Node {
        Node { kind: NodeKind::Leaf { tensor: tensor.to_owned() }, indices, spp: None, eqspp: None }
    }

    fn unplaced(kind: NodeKind) -> Node {
        Node { kind, indices: IndexString::default(), spp: None, eqspp: None }
    }

    pub fn children(&self) -> Vec<&Node> {
        match &self.kind {
            NodeKind::Leaf { .. } => vec![],
            NodeKind::ScalarMul { child, .. }
            | NodeKind::Permute { child }
            | NodeKind::IndexSum { child, .. } => vec![child],
            NodeKind::Add { children } | NodeKind::Einsum { children } => children.iter().collect(),
            NodeKind::Product { left, right } | NodeKind::Contraction { left, right, .. } => {
                vec![left, right]
            }
        }
    }

    /// Preorder traversal.
    pub fn walk(&self, f: &mut impl FnMut(&Node)) {
        f(self);
        for c in self.children() {
            c.walk(f);
        }
    }

    /// The pattern to use for this node as an operand: the equivalent
    /// sparsity pattern when one has been computed, else the plain one.
    pub fn effective_spp(&self) -> Option<&SparsityPattern> {
        self.eqspp.as_ref().or(self.spp.as_ref())
    }
}

/// An expression under construction: a node or a bare scalar factor.
#[derive(Debug, Clone)]
pub struct Expr(ExprInner);

#[derive(Debug, Clone)]
enum ExprInner {
    Node(Node),
    Scalar(ScalarCoeff),
}

/// Indexed tensor access, e.g. `access("A", "lj")`. Panics on a
/// malformed index string; semantic errors surface as diagnostics.
pub fn access(tensor: &str, indices: &str) -> Expr {
    let idx = IndexString::new(indices)
        .unwrap_or_else(|e| panic!("invalid index string '{indices}': {e}"));
    Expr(ExprInner::Node(Node::leaf(tensor, idx)))
}

/// Literal scalar factor.
pub fn lit(value: f64) -> Expr {
    Expr(ExprInner::Scalar(ScalarCoeff::literal(value)))
}

/// Named scalar factor bound at run time.
pub fn sym(name: &str) -> Expr {
    Expr(ExprInner::Scalar(ScalarCoeff::symbol(name)))
}

impl Expr {
    pub fn into_node(self) -> Result<Node, AstError> {
        match self.0 {
            ExprInner::Node(n) => Ok(n),
            ExprInner::Scalar(_) => Err(AstError::ScalarExpression),
        }
    }
}

/// Which node type an operator merges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineKind {
    Einsum,
    Add,
}

/// Splits a node into its hoisted scalar multiplier and the bare node.
fn strip_scalar(node: Node) -> (ScalarCoeff, Node) {
    match node.kind {
        NodeKind::ScalarMul { coeff, child } => (coeff, *child),
        _ => (ScalarCoeff::one(), node),
    }
}

fn rewrap(coeff: ScalarCoeff, node: Node) -> Node {
    if coeff.is_one() {
        node
    } else {
        Node::unplaced(NodeKind::ScalarMul { coeff, child: Box::new(node) })
    }
}

/// Merges two operands under the given node type using the four
/// actions: children of matching type are concatenated, a matching
/// side absorbs the other, and two non-matching operands get a fresh
/// parent. For `*`, scalar multipliers are folded together and hoisted
/// above the merged Einsum.
pub fn combine(op1: Node, op2: Node, kind: CombineKind) -> Node {
    match kind {
        CombineKind::Einsum => {
            let (c1, n1) = strip_scalar(op1);
            let (c2, n2) = strip_scalar(op2);
            let coeff = c1.times(&c2);
            let merged = match (n1, n2) {
                (
                    Node { kind: NodeKind::Einsum { children: mut a }, .. },
                    Node { kind: NodeKind::Einsum { children: b }, .. },
                ) => {
                    a.extend(b);
                    Node::unplaced(NodeKind::Einsum { children: a })
                }
                (Node { kind: NodeKind::Einsum { children: mut a }, .. }, other) => {
                    a.push(other);
                    Node::unplaced(NodeKind::Einsum { children: a })
                }
                (other, Node { kind: NodeKind::Einsum { children: b }, .. }) => {
                    let mut children = vec![other];
                    children.extend(b);
                    Node::unplaced(NodeKind::Einsum { children })
                }
                (a, b) => Node::unplaced(NodeKind::Einsum { children: vec![a, b] }),
            };
            rewrap(coeff, merged)
        }
        CombineKind::Add => {
            let merged = match (op1, op2) {
                (
                    Node { kind: NodeKind::Add { children: mut a }, .. },
                    Node { kind: NodeKind::Add { children: b }, .. },
                ) => {
                    a.extend(b);
                    a
                }
                (Node { kind: NodeKind::Add { children: mut a }, .. }, other) => {
                    a.push(other);
                    a
                }
                (other, Node { kind: NodeKind::Add { children: b }, .. }) => {
                    let mut children = vec![other];
                    children.extend(b);
                    children
                }
                (a, b) => vec![a, b],
            };
            Node::unplaced(NodeKind::Add { children: merged })
        }
    }
}

impl OpMul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        match (self.0, rhs.0) {
            (ExprInner::Scalar(a), ExprInner::Scalar(b)) => Expr(ExprInner::Scalar(a.times(&b))),
            (ExprInner::Scalar(a), ExprInner::Node(n))
            | (ExprInner::Node(n), ExprInner::Scalar(a)) => {
                let (c, bare) = strip_scalar(n);
                Expr(ExprInner::Node(rewrap(a.times(&c), bare)))
            }
            (ExprInner::Node(a), ExprInner::Node(b)) => {
                Expr(ExprInner::Node(combine(a, b, CombineKind::Einsum)))
            }
        }
    }
}

impl OpMul<Expr> for f64 {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        lit(self) * rhs
    }
}

impl OpAdd for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        let to_node = |e: ExprInner| match e {
            ExprInner::Node(n) => n,
            // A bare scalar cannot participate in '+'; keep it as a
            // marker the validator reports instead of panicking here.
            ExprInner::Scalar(c) => Node::unplaced(NodeKind::ScalarMul {
                coeff: c,
                child: Box::new(Node::unplaced(NodeKind::Add { children: vec![] })),
            }),
        };
        Expr(ExprInner::Node(combine(to_node(self.0), to_node(rhs.0), CombineKind::Add)))
    }
}

/// Errors from index deduction and expression shaping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AstError {
    /// A letter occurring once among the operands of the top-level
    /// expression is absent from the assignment target.
    FreeIndexNotInTarget { letter: char },
    /// Add children disagree on their letter sets.
    IndexMismatch { first: String, second: String },
    /// The deduced result letters do not match the assignment target.
    TargetMismatch { target: String, deduced: String },
    UndeclaredTensor { name: String },
    RankMismatch { name: String, access: String, rank: usize },
    /// A bare scalar where a tensor expression is required.
    ScalarExpression,
    /// An Add node with no children (from a scalar misuse).
    EmptyAdd,
}

impl fmt::Display for AstError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AstError::FreeIndexNotInTarget { letter } => {
                write!(f, "index '{letter}' occurs once but is not a target index")
            }
            AstError::IndexMismatch { first, second } => {
                write!(f, "addition requires equal index sets, got '{first}' and '{second}'")
            }
            AstError::TargetMismatch { target, deduced } => {
                write!(f, "expression indices '{deduced}' do not match target '{target}'")
            }
            AstError::UndeclaredTensor { name } => write!(f, "tensor '{name}' is not declared"),
            AstError::RankMismatch { name, access, rank } => {
                write!(f, "index string '{access}' does not match rank {rank} of '{name}'")
            }
            AstError::ScalarExpression => write!(f, "expected a tensor expression, got a scalar"),
            AstError::EmptyAdd => write!(f, "a scalar cannot be an addition operand"),
        }
    }
}

impl core::error::Error for AstError {}

/// Deduces the result index string of every node. Einsum results are
/// the letters of the assignment target that appear among the operands
/// plus all letters occurring exactly once; letters occurring twice or
/// more and absent from the target are contracted. Non-leaf results use
/// the canonical lexical order; a later stage chooses storage orders.
pub fn deduce_indices(
    node: &mut Node,
    target: &IndexString,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<(), AstError> {
    match &mut node.kind {
        NodeKind::Leaf { tensor } => {
            let t = tensors
                .get(tensor)
                .ok_or_else(|| AstError::UndeclaredTensor { name: tensor.clone() })?;
            if node.indices.len() != t.rank() {
                return Err(AstError::RankMismatch {
                    name: tensor.clone(),
                    access: format!("{}", node.indices),
                    rank: t.rank(),
                });
            }
            Ok(())
        }
        NodeKind::ScalarMul { child, .. } => {
            deduce_indices(child, target, tensors)?;
            node.indices = child.indices.clone();
            Ok(())
        }
        NodeKind::Add { children } => {
            if children.is_empty() {
                return Err(AstError::EmptyAdd);
            }
            for c in children.iter_mut() {
                deduce_indices(c, target, tensors)?;
            }
            let first = children[0].indices.clone();
            for c in children.iter_mut().skip(1) {
                if !c.indices.same_letters(&first) {
                    return Err(AstError::IndexMismatch {
                        first: format!("{first}"),
                        second: format!("{}", c.indices),
                    });
                }
                if c.indices != first {
                    // Record the reordering explicitly.
                    let inner =
                        core::mem::replace(c, Node::unplaced(NodeKind::Add { children: vec![] }));
                    *c = Node {
                        kind: NodeKind::Permute { child: Box::new(inner) },
                        indices: first.clone(),
                        spp: None,
                        eqspp: None,
                    };
                }
            }
            node.indices = first;
            Ok(())
        }
        NodeKind::Einsum { children } => {
            for c in children.iter_mut() {
                deduce_indices(c, target, tensors)?;
            }
            let mut counts: BTreeMap<Letter, usize> = BTreeMap::new();
            for c in children.iter() {
                for &l in c.indices.letters() {
                    *counts.entry(l).or_insert(0) += 1;
                }
            }
            let mut letters: Vec<Letter> = counts
                .iter()
                .filter(|(l, &n)| n == 1 || target.contains(**l))
                .map(|(&l, _)| l)
                .collect();
            letters.sort_by_key(|&l| letter_rank(l).unwrap());
            node.indices = IndexString::from_letters(&letters);
            Ok(())
        }
        NodeKind::Permute { child } => {
            deduce_indices(child, target, tensors)?;
            Ok(())
        }
        // Post-strength-reduction kinds carry their indices already.
        _ => Ok(()),
    }
}

/// Shapes of assignment statements: plain assign (`<=`) or accumulate
/// (`+=`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignOp {
    Assign,
    Accumulate,
}

/// One `target <= expr` or `target += expr` statement.
#[derive(Debug, Clone)]
pub struct Statement {
    pub target: String,
    pub target_indices: IndexString,
    pub op: AssignOp,
    pub expr: Node,
}

impl Statement {
    /// The pipeline-internal form: `target += expr` desugars to
    /// `target <= target + expr`; a later pass re-fuses the accumulate.
    pub fn desugared_expr(&self) -> Node {
        match self.op {
            AssignOp::Assign => self.expr.clone(),
            AssignOp::Accumulate => {
                let tgt = Node::leaf(&self.target, self.target_indices.clone());
                combine(tgt, self.expr.clone(), CombineKind::Add)
            }
        }
    }
}

/// A named kernel: an ordered list of statements plus prefetch
/// requests.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub name: String,
    pub statements: Vec<Statement>,
    pub prefetch: Vec<String>,
}

/// A kernel family: declarations shared by a set of kernels that are
/// compiled together into one generated unit.
#[derive(Debug, Clone, Default)]
pub struct Family {
    pub name: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub scalars: BTreeMap<String, Option<f64>>,
    pub layout_requests: BTreeMap<String, LayoutPolicy>,
    pub kernels: Vec<Kernel>,
}

impl Family {
    pub fn new(name: &str) -> Self {
        Family { name: name.to_owned(), ..Default::default() }
    }

    pub fn declare(&mut self, tensor: Tensor) -> &mut Self {
        self.tensors.insert(tensor.name().to_owned(), tensor);
        self
    }

    pub fn declare_with_layout(&mut self, tensor: Tensor, policy: LayoutPolicy) -> &mut Self {
        self.layout_requests.insert(tensor.name().to_owned(), policy);
        self.declare(tensor)
    }

    pub fn declare_scalar(&mut self, name: &str, value: Option<f64>) -> &mut Self {
        self.scalars.insert(name.to_owned(), value);
        self
    }

    pub fn kernel(&mut self, name: &str) -> KernelBuilder<'_> {
        KernelBuilder {
            family: self,
            kernel: Kernel { name: name.to_owned(), statements: Vec::new(), prefetch: Vec::new() },
        }
    }
}

/// Builder for one kernel of a family.
pub struct KernelBuilder<'a> {
    family: &'a mut Family,
    kernel: Kernel,
}

impl KernelBuilder<'_> {
    pub fn assign(mut self, target: Expr, expr: Expr) -> Self {
        self.push(target, AssignOp::Assign, expr);
        self
    }

    pub fn accumulate(mut self, target: Expr, expr: Expr) -> Self {
        self.push(target, AssignOp::Accumulate, expr);
        self
    }

    fn push(&mut self, target: Expr, op: AssignOp, expr: Expr) {
        let tgt = target.into_node().expect("assignment target must be a tensor access");
        let NodeKind::Leaf { tensor } = &tgt.kind else {
            panic!("assignment target must be a tensor access");
        };
        let expr_node = match expr.0 {
            ExprInner::Node(n) => n,
            ExprInner::Scalar(c) => Node::unplaced(NodeKind::ScalarMul {
                coeff: c,
                child: Box::new(Node::unplaced(NodeKind::Add { children: vec![] })),
            }),
        };
        self.kernel.statements.push(Statement {
            target: tensor.clone(),
            target_indices: tgt.indices,
            op,
            expr: expr_node,
        });
    }

    pub fn prefetch(mut self, tensors: &[&str]) -> Self {
        self.kernel.prefetch.extend(tensors.iter().map(|s| (*s).to_owned()));
        self
    }

    pub fn build(self) {
        self.family.kernels.push(self.kernel);
    }
}

/// A validation finding with a stable code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub code: &'static str,
    pub message: String,
}

impl Diagnostic {
    fn new(code: &'static str, message: String) -> Self {
        Diagnostic { code, message }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.code, self.message)
    }
}

/// Validates a family: declarations, ranks, index-size consistency,
/// alphabet budget, and per-statement index deduction. Returns all
/// findings; an empty list means the family compiles.
pub fn validate_family(family: &Family) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for kernel in &family.kernels {
        let mut distinct: Vec<Letter> = Vec::new();
        for stmt in &kernel.statements {
            let mut sizes: BTreeMap<Letter, usize> = BTreeMap::new();
            {
                let mut record_access = |name: &str, indices: &IndexString, out: &mut Vec<Diagnostic>| {
                    let Some(t) = family.tensors.get(name) else {
                        out.push(Diagnostic::new(
                            "undeclared-tensor",
                            format!("kernel '{}': tensor '{name}' is not declared", kernel.name),
                        ));
                        return;
                    };
                    if indices.len() != t.rank() {
                        out.push(Diagnostic::new(
                            "index-length",
                            format!(
                                "kernel '{}': index string '{indices}' has length {} but tensor '{name}' has rank {}",
                                kernel.name,
                                indices.len(),
                                t.rank()
                            ),
                        ));
                        return;
                    }
                    for (d, &l) in indices.letters().iter().enumerate() {
                        if !distinct.contains(&l) {
                            distinct.push(l);
                        }
                        let extent = t.shape()[d];
                        match sizes.get(&l) {
                            Some(&e) if e != extent => out.push(Diagnostic::new(
                                "index-size",
                                format!(
                                    "kernel '{}': index '{}' has inconsistent sizes {e} and {extent}",
                                    kernel.name, l as char
                                ),
                            )),
                            _ => {
                                sizes.insert(l, extent);
                            }
                        }
                    }
                };
                record_access(&stmt.target, &stmt.target_indices, &mut out);
                stmt.expr.walk(&mut |n| {
                    if let NodeKind::Leaf { tensor } = &n.kind {
                        record_access(tensor, &n.indices, &mut out);
                    }
                    if let NodeKind::ScalarMul { coeff, .. } = &n.kind {
                        for s in &coeff.symbols {
                            if !family.scalars.contains_key(s) {
                                out.push(Diagnostic::new(
                                    "undeclared-scalar",
                                    format!(
                                        "kernel '{}': scalar '{s}' is not declared",
                                        kernel.name
                                    ),
                                ));
                            }
                        }
                    }
                });
            }
            // Deduction errors (free indices, add mismatches) on a copy.
            let mut expr = stmt.desugared_expr();
            match deduce_indices(&mut expr, &stmt.target_indices, &family.tensors) {
                Err(e) => out.push(Diagnostic::new(
                    "index-deduction",
                    format!("kernel '{}': {e}", kernel.name),
                )),
                Ok(()) => {
                    if !expr.indices.same_letters(&stmt.target_indices) {
                        // Attribute the mismatch to a free index when one exists.
                        let mut counts: BTreeMap<Letter, usize> = BTreeMap::new();
                        expr.walk(&mut |n| {
                            if let NodeKind::Leaf { .. } = n.kind {
                                for &l in n.indices.letters() {
                                    *counts.entry(l).or_insert(0) += 1;
                                }
                            }
                        });
                        let offender = counts
                            .iter()
                            .find(|(l, &c)| c == 1 && !stmt.target_indices.contains(**l));
                        let e = match offender {
                            Some((&l, _)) => AstError::FreeIndexNotInTarget { letter: l as char },
                            None => AstError::TargetMismatch {
                                target: format!("{}", stmt.target_indices),
                                deduced: format!("{}", expr.indices),
                            },
                        };
                        out.push(Diagnostic::new(
                            "index-deduction",
                            format!("kernel '{}': {e}", kernel.name),
                        ));
                    }
                }
            }
        }
        if distinct.len() > 52 {
            out.push(Diagnostic::new(
                "alphabet-exhausted",
                format!(
                    "kernel '{}' uses {} distinct indices, limit is 52",
                    kernel.name,
                    distinct.len()
                ),
            ));
        }
        for p in &kernel.prefetch {
            if !family.tensors.contains_key(p) {
                out.push(Diagnostic::new(
                    "undeclared-tensor",
                    format!("kernel '{}': prefetch tensor '{p}' is not declared", kernel.name),
                ));
            }
        }
    }
    out
}

/// Propagates sparsity patterns bottom-up and computes the equivalent
/// sparsity patterns of every Einsum node's operands. Add nodes take
/// the element-wise OR of their children, as implied by the
/// no-cancellation assumption.
pub fn propagate_patterns(
    node: &mut Node,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<(), crate::index::IndexError> {
    match &mut node.kind {
        NodeKind::Leaf { tensor } => {
            node.spp = Some(tensors[tensor.as_str()].spp().clone());
        }
        NodeKind::ScalarMul { coeff, child } => {
            propagate_patterns(child, tensors)?;
            node.spp = if coeff.literal == 0.0 && coeff.symbols.is_empty() {
                Some(SparsityPattern::zeros(child.spp.as_ref().unwrap().extents()))
            } else {
                child.effective_spp().cloned()
            };
        }
        NodeKind::Add { children } => {
            let indices = node.indices.clone();
            let mut acc: Option<SparsityPattern> = None;
            for c in children.iter_mut() {
                propagate_patterns(c, tensors)?;
                let aligned = align_pattern(c, &indices);
                match &mut acc {
                    None => acc = Some(aligned),
                    Some(a) => a.or_assign(&aligned),
                }
            }
            node.spp = acc;
        }
        NodeKind::Permute { child } => {
            propagate_patterns(child, tensors)?;
            let indices = node.indices.clone();
            node.spp = Some(align_pattern(child, &indices));
        }
        NodeKind::Einsum { children } => {
            for c in children.iter_mut() {
                propagate_patterns(c, tensors)?;
            }
            let ops: Vec<(&SparsityPattern, &IndexString)> =
                children.iter().map(|c| (c.spp.as_ref().unwrap(), &c.indices)).collect();
            let eq = crate::eqspp::compute_eqspp(&ops, &node.indices)?;
            for (c, mask) in children.iter_mut().zip(eq.operands) {
                c.eqspp = Some(mask);
            }
            node.spp = Some(eq.result);
        }
        _ => {}
    }
    Ok(())
}

/// A child's pattern permuted into the order of `indices`.
fn align_pattern(child: &Node, indices: &IndexString) -> SparsityPattern {
    let spp = child.effective_spp().unwrap();
    if child.indices == *indices {
        return spp.clone();
    }
    let perm: Vec<usize> = indices
        .letters()
        .iter()
        .map(|&l| child.indices.position(l).expect("aligned patterns share letters"))
        .collect();
    spp.permuted(&perm)
}

/// Bound values for naive evaluation: dense column-major grids per
/// tensor name plus scalar values.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    pub tensors: BTreeMap<String, Vec<f64>>,
    pub scalars: BTreeMap<String, f64>,
}

/// Evaluates an expression tree with the naive Einstein-sum oracle.
/// The returned grid is dense column-major over `node.indices`.
pub fn evaluate(
    node: &Node,
    tensors: &BTreeMap<String, Tensor>,
    bindings: &Bindings,
) -> Result<Vec<f64>, crate::index::IndexError> {
    let value_of = |name: &str| -> Vec<f64> {
        bindings
            .tensors
            .get(name)
            .cloned()
            .or_else(|| tensors.get(name).and_then(|t| t.values().map(|v| v.to_vec())))
            .unwrap_or_else(|| panic!("no values bound for tensor '{name}'"))
    };
    match &node.kind {
        NodeKind::Leaf { tensor } => Ok(value_of(tensor)),
        NodeKind::ScalarMul { coeff, child } => {
            let v = coeff
                .resolve(&bindings.scalars)
                .unwrap_or_else(|| panic!("unbound scalar in '{coeff}'"));
            let mut grid = evaluate(child, tensors, bindings)?;
            for x in &mut grid {
                *x *= v;
            }
            Ok(grid)
        }
        NodeKind::Add { children } => {
            let mut acc: Option<Vec<f64>> = None;
            for c in children {
                let grid = evaluate(c, tensors, bindings)?;
                let shape = node_shape(c, tensors);
                let aligned = permute_grid(&grid, &shape, &c.indices, &node.indices);
                match &mut acc {
                    None => acc = Some(aligned),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(aligned) {
                            *x += y;
                        }
                    }
                }
            }
            Ok(acc.expect("add node has children"))
        }
        NodeKind::Permute { child } => {
            let grid = evaluate(child, tensors, bindings)?;
            let shape = node_shape(child, tensors);
            Ok(permute_grid(&grid, &shape, &child.indices, &node.indices))
        }
        NodeKind::Einsum { children } => {
            let grids: Vec<Vec<f64>> = children
                .iter()
                .map(|c| evaluate(c, tensors, bindings))
                .collect::<Result<_, _>>()?;
            let shapes: Vec<Vec<usize>> = children.iter().map(|c| node_shape(c, tensors)).collect();
            let ops: Vec<(&IndexString, &[usize], &[f64])> = children
                .iter()
                .zip(&shapes)
                .zip(&grids)
                .map(|((c, s), g)| (&c.indices, s.as_slice(), g.as_slice()))
                .collect();
            naive_einsum(&node.indices, &ops)
        }
        NodeKind::Product { left, right } | NodeKind::Contraction { left, right, .. } => {
            let lg = evaluate(left, tensors, bindings)?;
            let rg = evaluate(right, tensors, bindings)?;
            let ls = node_shape(left, tensors);
            let rs = node_shape(right, tensors);
            naive_einsum(&node.indices, &[(&left.indices, &ls, &lg), (&right.indices, &rs, &rg)])
        }
        NodeKind::IndexSum { child, .. } => {
            let grid = evaluate(child, tensors, bindings)?;
            let shape = node_shape(child, tensors);
            naive_einsum(&node.indices, &[(&child.indices, &shape, &grid)])
        }
    }
}

/// Extents of a node's value grid, in the order of its index string.
pub fn node_shape(node: &Node, tensors: &BTreeMap<String, Tensor>) -> Vec<usize> {
    match &node.kind {
        NodeKind::Leaf { tensor } => tensors[tensor.as_str()].shape().to_vec(),
        _ => node
            .spp
            .as_ref()
            .map(|s| s.extents().to_vec())
            .expect("internal nodes carry patterns after propagation"),
    }
}

/// Reorders a dense column-major grid from one letter order to another
/// over the same letter set.
pub fn permute_grid(
    grid: &[f64],
    shape: &[usize],
    from: &IndexString,
    to: &IndexString,
) -> Vec<f64> {
    if from == to {
        return grid.to_vec();
    }
    let perm: Vec<usize> = to
        .letters()
        .iter()
        .map(|&l| from.position(l).expect("permutation over the same letters"))
        .collect();
    let to_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    let mut out = vec![0.0; grid.len()];
    let mut src = vec![0usize; shape.len()];
    crate::index::for_each_point(&to_shape, |p| {
        for (d, &s) in perm.iter().enumerate() {
            src[s] = p[d];
        }
        out[crate::index::colmajor_offset(&to_shape, p)] =
            grid[crate::index::colmajor_offset(shape, &src)];
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(s: &str) -> IndexString {
        IndexString::new(s).unwrap()
    }

    fn family_abcw() -> Family {
        let mut f = Family::new("t");
        f.declare(Tensor::new("A", &[2, 2]).unwrap());
        f.declare(Tensor::new("B", &[2, 2, 2]).unwrap());
        f.declare(Tensor::new("C", &[2, 2]).unwrap());
        f.declare(Tensor::new("w", &[2]).unwrap());
        f
    }

    #[test]
    fn star_chain_merges_into_one_einsum() {
        // (A*B)*w yields one Einsum with children [A, B, w].
        let e = (access("A", "lj") * access("B", "ikl")) * access("w", "k");
        let n = e.into_node().unwrap();
        match &n.kind {
            NodeKind::Einsum { children } => {
                let names: Vec<&str> = children
                    .iter()
                    .map(|c| match &c.kind {
                        NodeKind::Leaf { tensor } => tensor.as_str(),
                        _ => "?",
                    })
                    .collect();
                assert_eq!(names, ["A", "B", "w"]);
            }
            other => panic!("expected einsum, got {other:?}"),
        }
    }

    #[test]
    fn combine_is_observationally_associative() {
        let left = (access("A", "ij") * access("B", "jk")) * access("C", "kl");
        let right = access("A", "ij") * (access("B", "jk") * access("C", "kl"));
        let (l, r) = (left.into_node().unwrap(), right.into_node().unwrap());
        let names = |n: &Node| -> Vec<String> {
            match &n.kind {
                NodeKind::Einsum { children } => children
                    .iter()
                    .map(|c| match &c.kind {
                        NodeKind::Leaf { tensor } => tensor.clone(),
                        _ => "?".into(),
                    })
                    .collect(),
                _ => panic!("expected einsum"),
            }
        };
        let (mut a, mut b) = (names(&l), names(&r));
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn addition_is_not_distributed() {
        // A * (B + C) keeps the Add as an Einsum operand.
        let e = access("A", "ik") * (access("B", "kj") + access("C", "kj"));
        let n = e.into_node().unwrap();
        match &n.kind {
            NodeKind::Einsum { children } => {
                assert_eq!(children.len(), 2);
                assert!(matches!(children[1].kind, NodeKind::Add { .. }));
            }
            _ => panic!("expected einsum"),
        }
    }

    #[test]
    fn literal_scalars_fold_eagerly() {
        let e = lit(2.0) * (lit(3.0) * access("A", "ij"));
        let n = e.into_node().unwrap();
        match &n.kind {
            NodeKind::ScalarMul { coeff, child } => {
                assert_eq!(coeff.literal, 6.0);
                assert!(coeff.symbols.is_empty());
                assert!(matches!(child.kind, NodeKind::Leaf { .. }));
            }
            _ => panic!("expected scalar multiplication"),
        }
    }

    #[test]
    fn scalar_hoists_above_merged_einsum() {
        let e = (lit(2.0) * access("A", "ik")) * (sym("dt") * access("B", "kj"));
        let n = e.into_node().unwrap();
        match &n.kind {
            NodeKind::ScalarMul { coeff, child } => {
                assert_eq!(coeff.literal, 2.0);
                assert_eq!(coeff.symbols, ["dt"]);
                assert!(matches!(child.kind, NodeKind::Einsum { .. }));
            }
            _ => panic!("expected hoisted scalar"),
        }
    }

    #[test]
    fn shape_invariants_hold_after_construction() {
        let e = (access("A", "lj") * access("B", "ikl") * access("w", "k"))
            + (lit(2.0) * access("C", "ij"));
        let n = e.into_node().unwrap();
        n.walk(&mut |node| {
            for c in node.children() {
                match (&node.kind, &c.kind) {
                    (NodeKind::Einsum { .. }, NodeKind::Einsum { .. }) => {
                        panic!("einsum child of einsum")
                    }
                    (NodeKind::Add { .. }, NodeKind::Add { .. }) => panic!("add child of add"),
                    (NodeKind::Einsum { .. }, NodeKind::ScalarMul { .. }) => {
                        panic!("einsum parent of scalar multiplication")
                    }
                    _ => {}
                }
            }
        });
    }

    #[test]
    fn deduce_contracts_twice_occurring_letters() {
        // Target C['ij'] over A['lj'], B['ikl'], w['k']: contracted
        // {l,k}, free {i,j}.
        let f = family_abcw();
        let mut n =
            (access("A", "lj") * access("B", "ikl") * access("w", "k")).into_node().unwrap();
        deduce_indices(&mut n, &idx("ij"), &f.tensors).unwrap();
        assert_eq!(n.indices, idx("ij"));
    }

    #[test]
    fn deduce_volume_kernel_contracts_l_and_q() {
        // Q_skp = I_slq K_lk A_qp: contracted {l,q}.
        let mut f = Family::new("t");
        f.declare(Tensor::new("I", &[4, 5, 3]).unwrap());
        f.declare(Tensor::new("K", &[5, 6]).unwrap());
        f.declare(Tensor::new("A", &[3, 2]).unwrap());
        let mut n =
            (access("I", "slq") * access("K", "lk") * access("A", "qp")).into_node().unwrap();
        deduce_indices(&mut n, &idx("skp"), &f.tensors).unwrap();
        assert!(n.indices.same_letters(&idx("skp")));
        assert!(!n.indices.contains(b'l') && !n.indices.contains(b'q'));
    }

    #[test]
    fn add_with_permuted_letters_gets_explicit_permute() {
        let f = family_abcw();
        let mut n = (access("A", "ij") + access("C", "ji")).into_node().unwrap();
        deduce_indices(&mut n, &idx("ij"), &f.tensors).unwrap();
        match &n.kind {
            NodeKind::Add { children } => {
                assert!(matches!(children[0].kind, NodeKind::Leaf { .. }));
                assert!(matches!(children[1].kind, NodeKind::Permute { .. }));
                assert_eq!(children[1].indices, idx("ij"));
            }
            _ => panic!("expected add"),
        }
    }

    #[test]
    fn add_letter_mismatch_is_an_error() {
        let f = family_abcw();
        let mut n = (access("A", "ij") + access("w", "k")).into_node().unwrap();
        let err = deduce_indices(&mut n, &idx("ij"), &f.tensors).unwrap_err();
        assert!(matches!(err, AstError::IndexMismatch { .. }));
    }

    #[test]
    fn validation_reports_expected_diagnostics() {
        let mut f = family_abcw();
        f.kernel("k")
            .assign(access("A", "ij"), access("B", "ij") * access("undeclared", "jk"))
            .build();
        let diags = validate_family(&f);
        assert!(diags.iter().any(|d| d.code == "undeclared-tensor"));
        assert!(diags.iter().any(|d| d.code == "index-length"), "B accessed with rank-2 string");

        let mut f2 = family_abcw();
        f2.kernel("k2").assign(access("C", "ij"), access("A", "lj") * access("B", "ikl")).build();
        let diags2 = validate_family(&f2);
        // k occurs once in B and is absent from the target.
        assert!(diags2.iter().any(|d| d.code == "index-deduction" && d.message.contains("'k'")));
    }

    #[test]
    fn patterns_propagate_through_einsum_and_add() {
        let mut f = Family::new("t");
        f.declare(
            Tensor::with_pattern("D", &[2, 2], SparsityPattern::diagonal(2)).unwrap(),
        );
        f.declare(Tensor::new("E", &[2, 2]).unwrap());
        let mut n = (access("D", "ik") * access("E", "kj")).into_node().unwrap();
        deduce_indices(&mut n, &idx("ij"), &f.tensors).unwrap();
        propagate_patterns(&mut n, &f.tensors).unwrap();
        assert!(n.spp.as_ref().unwrap().is_dense());
        // The dense operand keeps a dense mask; the diagonal one stays diagonal.
        match &n.kind {
            NodeKind::Einsum { children } => {
                assert_eq!(children[0].eqspp.as_ref().unwrap(), &SparsityPattern::diagonal(2));
                assert!(children[1].eqspp.as_ref().unwrap().is_dense());
            }
            _ => panic!("expected einsum"),
        }
    }

    #[test]
    fn evaluation_is_stable_under_normalization() {
        // The merged-tree form evaluates identically to a handwritten
        // direct computation.
        let f = family_abcw();
        let mut bindings = Bindings::default();
        let mut v = 0.3f64;
        for name in ["A", "B", "C", "w"] {
            let n = f.tensors[name].element_count();
            bindings.tensors.insert(
                name.into(),
                (0..n)
                    .map(|_| {
                        v = (v * 997.0 + 0.123).fract();
                        v - 0.5
                    })
                    .collect(),
            );
        }
        let e = (lit(2.0) * access("C", "ij"))
            + access("A", "lj") * access("B", "ikl") * access("w", "k");
        let mut n = e.into_node().unwrap();
        deduce_indices(&mut n, &idx("ij"), &f.tensors).unwrap();
        propagate_patterns(&mut n, &f.tensors).unwrap();
        let got = evaluate(&n, &f.tensors, &bindings).unwrap();

        let a = &bindings.tensors["A"];
        let b = &bindings.tensors["B"];
        let c = &bindings.tensors["C"];
        let w = &bindings.tensors["w"];
        for i in 0..2 {
            for j in 0..2 {
                let mut expect = 2.0 * c[i + 2 * j];
                for k in 0..2 {
                    for l in 0..2 {
                        expect += a[l + 2 * j] * b[i + 2 * (k + 2 * l)] * w[k];
                    }
                }
                let got_ij = got[i + 2 * j];
                assert!((got_ij - expect).abs() <= 1e-13 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn desugared_accumulate_adds_the_target() {
        let mut f = family_abcw();
        f.kernel("k")
            .accumulate(access("C", "ij"), access("A", "ik") * access("C", "kj"))
            .build();
        let stmt = &f.kernels[0].statements[0];
        assert_eq!(stmt.op, AssignOp::Accumulate);
        let expr = stmt.desugared_expr();
        match &expr.kind {
            NodeKind::Add { children } => {
                assert_eq!(children.len(), 2);
                assert!(matches!(&children[0].kind, NodeKind::Leaf { tensor } if tensor == "C"));
            }
            _ => panic!("expected add of target and expression"),
        }
    }
}
