//! Branch-free control-flow programs and their optimisation passes.
//!
//! A kernel lowers to a straight-line sequence of actions between
//! program points. An action assigns (`=`) or accumulates (`+=`) into a
//! tensor or temporary; the right-hand side is a variable or one of the
//! operations kept in the tree (loop-over-GEMM, product, index sum),
//! optionally augmented with a scalar multiplier. The passes are, in
//! order: MergeScalarMultiplications, LivenessAnalysis,
//! SubstituteForward, SubstituteBackward, RemoveEmptyStatements,
//! MergeActions, and DetermineLocalInitialization (the greedy buffer
//! map). Every pass preserves semantics action for action; they only
//! rename, fold multipliers, and merge.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::ast::{Node, NodeKind, ScalarCoeff, Statement};
use crate::index::{IndexString, Letter};
use crate::layout::{assign_layout, LayoutPolicy, MemoryLayout};
use crate::logmap::LogDescriptor;
use crate::pattern::SparsityPattern;

/// A variable reference: the variable's name plus the letters labelling
/// its dimensions in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarRef {
    pub name: String,
    pub indices: IndexString,
}

/// Right-hand side of an action.
#[derive(Debug, Clone, PartialEq)]
pub enum Rhs {
    /// Element-wise read of a variable (a copy/scale/add source).
    Var(VarRef),
    /// Loop-over-GEMM over the two factors.
    Log { desc: LogDescriptor, left: VarRef, right: VarRef },
    /// Element-wise multiplication formula (outer or Hadamard product).
    Product { left: VarRef, right: VarRef },
    /// Summation formula over the given letters.
    IndexSum { letters: Vec<Letter>, child: VarRef },
}

impl Rhs {
    pub fn reads(&self) -> Vec<&VarRef> {
        match self {
            Rhs::Var(v) => vec![v],
            Rhs::Log { left, right, .. } | Rhs::Product { left, right } => vec![left, right],
            Rhs::IndexSum { child, .. } => vec![child],
        }
    }
}

/// One edge of the control-flow graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub dst: VarRef,
    /// `false` for `=`, `true` for `+=` (the GEMM beta).
    pub accumulate: bool,
    pub alpha: ScalarCoeff,
    pub rhs: Rhs,
}

/// Storage info for one temporary.
#[derive(Debug, Clone, PartialEq)]
pub struct TempInfo {
    pub indices: IndexString,
    pub layout: MemoryLayout,
    pub spp: SparsityPattern,
}

/// Greedy assignment of temporaries to shared buffers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BufferPlan {
    pub assignment: BTreeMap<String, usize>,
    /// Buffer sizes in elements.
    pub sizes: Vec<usize>,
}

/// A straight-line program over tensors and temporaries.
#[derive(Debug, Clone, Default)]
pub struct CfgProgram {
    pub actions: Vec<Action>,
    pub temps: BTreeMap<String, TempInfo>,
    pub buffers: Option<BufferPlan>,
}

impl CfgProgram {
    pub fn is_temp(&self, name: &str) -> bool {
        self.temps.contains_key(name)
    }

    /// One action per line: `dst['idx'] op [alpha * ] rhs`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for a in &self.actions {
            let op = if a.accumulate { "+=" } else { "=" };
            let var = |v: &VarRef| format!("{}['{}']", v.name, v.indices);
            let rhs = match &a.rhs {
                Rhs::Var(v) => var(v),
                Rhs::Log { left, right, .. } => format!("log({}, {})", var(left), var(right)),
                Rhs::Product { left, right } => format!("product({}, {})", var(left), var(right)),
                Rhs::IndexSum { letters, child } => {
                    let ls: String = letters.iter().map(|&l| l as char).collect();
                    format!("sum_{ls}({})", var(child))
                }
            };
            let alpha = if a.alpha.is_one() { String::new() } else { format!("{} * ", a.alpha) };
            out.push_str(&format!("{} {op} {alpha}{rhs}\n", var(&a.dst)));
        }
        out
    }
}

struct Lowerer {
    actions: Vec<Action>,
    temps: BTreeMap<String, TempInfo>,
    counter: usize,
    temp_alignment: usize,
}

impl Lowerer {
    fn fresh_temp(&mut self, node: &Node) -> VarRef {
        let name = format!("_t{}", self.counter);
        self.counter += 1;
        let spp = node
            .effective_spp()
            .cloned()
            .expect("mapped nodes carry patterns");
        let layout = assign_layout(
            spp.extents(),
            &spp,
            LayoutPolicy::Aligned(self.temp_alignment),
        )
        .expect("box layouts are total");
        self.temps.insert(
            name.clone(),
            TempInfo { indices: node.indices.clone(), layout, spp },
        );
        VarRef { name, indices: node.indices.clone() }
    }

    /// Lowers a node, returning the variable holding its value.
    fn lower_node(&mut self, node: &Node) -> VarRef {
        match &node.kind {
            NodeKind::Leaf { tensor } => {
                VarRef { name: tensor.clone(), indices: node.indices.clone() }
            }
            NodeKind::Permute { child } => self.lower_node(child),
            NodeKind::ScalarMul { coeff, child } => {
                let src = self.lower_node(child);
                let dst = self.fresh_temp(node);
                self.actions.push(Action {
                    dst: dst.clone(),
                    accumulate: false,
                    alpha: coeff.clone(),
                    rhs: Rhs::Var(src),
                });
                dst
            }
            NodeKind::Add { children } => {
                let dst = self.fresh_temp(node);
                for (i, c) in children.iter().enumerate() {
                    let src = self.lower_node(c);
                    self.actions.push(Action {
                        dst: dst.clone(),
                        accumulate: i > 0,
                        alpha: ScalarCoeff::one(),
                        rhs: Rhs::Var(src),
                    });
                }
                dst
            }
            NodeKind::Product { left, right } => {
                let l = self.lower_node(left);
                let r = self.lower_node(right);
                let dst = self.fresh_temp(node);
                self.actions.push(Action {
                    dst: dst.clone(),
                    accumulate: false,
                    alpha: ScalarCoeff::one(),
                    rhs: Rhs::Product { left: l, right: r },
                });
                dst
            }
            NodeKind::IndexSum { letter, child } => {
                let src = self.lower_node(child);
                let dst = self.fresh_temp(node);
                self.actions.push(Action {
                    dst: dst.clone(),
                    accumulate: false,
                    alpha: ScalarCoeff::one(),
                    rhs: Rhs::IndexSum { letters: vec![*letter], child: src },
                });
                dst
            }
            NodeKind::Contraction { left, right, log, .. } => {
                let l = self.lower_node(left);
                let r = self.lower_node(right);
                let dst = self.fresh_temp(node);
                self.actions.push(Action {
                    dst: dst.clone(),
                    accumulate: false,
                    alpha: ScalarCoeff::one(),
                    rhs: Rhs::Log {
                        desc: log.clone().expect("contractions carry descriptors after mapping"),
                        left: l,
                        right: r,
                    },
                });
                dst
            }
            NodeKind::Einsum { .. } => unreachable!("einsum nodes are reduced before lowering"),
        }
    }
}

/// Lowers mapped statements to a sequential program: one action per
/// node in evaluation order, fresh temporaries for internal results.
pub fn lower(statements: &[(Statement, Node)], temp_alignment: usize) -> CfgProgram {
    let mut lw = Lowerer {
        actions: Vec::new(),
        temps: BTreeMap::new(),
        counter: 0,
        temp_alignment,
    };
    for (stmt, mapped) in statements {
        let value = lw.lower_node(mapped);
        lw.actions.push(Action {
            dst: VarRef { name: stmt.target.clone(), indices: stmt.target_indices.clone() },
            accumulate: false,
            alpha: ScalarCoeff::one(),
            rhs: Rhs::Var(value),
        });
    }
    CfgProgram { actions: lw.actions, temps: lw.temps, buffers: None }
}

/// Variables live before each action: a variable is live when a later
/// action reads it before any full overwrite. Declared tensors are
/// treated as live-out of the program.
pub fn liveness(program: &CfgProgram) -> Vec<BTreeSet<String>> {
    let mut live: BTreeSet<String> = program
        .actions
        .iter()
        .flat_map(|a| {
            let mut vs = vec![a.dst.name.clone()];
            vs.extend(a.rhs.reads().iter().map(|v| v.name.clone()));
            vs
        })
        .filter(|name| !program.is_temp(name))
        .collect();
    let mut out = vec![BTreeSet::new(); program.actions.len()];
    for (i, a) in program.actions.iter().enumerate().rev() {
        if !a.accumulate {
            live.remove(&a.dst.name);
        }
        for r in a.rhs.reads() {
            live.insert(r.name.clone());
        }
        if a.accumulate {
            live.insert(a.dst.name.clone());
        }
        out[i] = live.clone();
    }
    out
}

fn writes_between(program: &CfgProgram, from: usize, to: usize, name: &str) -> bool {
    program.actions[from + 1..to].iter().any(|a| a.dst.name == name)
}

fn reads_between(program: &CfgProgram, from: usize, to: usize, name: &str) -> bool {
    program.actions[from + 1..to]
        .iter()
        .any(|a| a.rhs.reads().iter().any(|r| r.name == name))
}

fn read_count(program: &CfgProgram, name: &str) -> usize {
    program
        .actions
        .iter()
        .map(|a| a.rhs.reads().iter().filter(|r| r.name == name).count())
        .sum()
}

/// Merges `A = f(...); B (=|+=) alpha * A` into `B (=|+=) alpha' * f(...)`
/// when `A` is a single-use temporary and nothing in between interferes.
/// The filter selects which consume sites a pass may touch.
fn merge_defs_into_uses(program: &mut CfgProgram, site_filter: impl Fn(&Action) -> bool) -> bool {
    let mut changed = false;
    let mut i = 0;
    while i < program.actions.len() {
        let candidate = {
            let def = &program.actions[i];
            let def_is_op = !matches!(def.rhs, Rhs::Var(_));
            if def.accumulate || !program.is_temp(&def.dst.name) {
                None
            } else {
                let name = def.dst.name.clone();
                let use_site = program.actions.iter().enumerate().skip(i + 1).find(|(_, a)| {
                    a.rhs.reads().iter().any(|r| r.name == name)
                });
                match use_site {
                    Some((j, a))
                        if matches!(&a.rhs, Rhs::Var(v) if v.name == name)
                            && site_filter(a)
                            && read_count(program, &name) == 1
                            && !writes_between(program, i, j, &name)
                            && !reads_between(program, i, j, &name)
                            && a.dst.name != name
                            && def
                                .rhs
                                .reads()
                                .iter()
                                .all(|r| !writes_between(program, i, j, &r.name))
                            && (def_is_op || true) =>
                    {
                        Some((i, j))
                    }
                    _ => None,
                }
            }
        };
        if let Some((def_idx, use_idx)) = candidate {
            let def = program.actions[def_idx].clone();
            let use_action = &mut program.actions[use_idx];
            use_action.alpha = use_action.alpha.times(&def.alpha);
            use_action.rhs = def.rhs;
            program.actions.remove(def_idx);
            program.temps.remove(&def.dst.name);
            changed = true;
            // Restart scanning at the merged position.
            i = 0;
        } else {
            i += 1;
        }
    }
    changed
}

/// Pass 1: `A = f(...); B = alpha A` becomes `B = alpha f(...)`.
pub fn merge_scalar_multiplications(program: &mut CfgProgram) {
    merge_defs_into_uses(program, |a| !a.alpha.is_one() && !a.accumulate);
}

/// Pass 3: after a copy `A = tmp` into a temporary, every later
/// occurrence of `A` (reads and writes) is renamed to `tmp`, making
/// `tmp` the working storage. The rename aborts when the original
/// program mentions `tmp` on its own after the values diverge; the
/// terminal copy-back `tmp = A` is the benign exception (it turns into
/// a self-copy and is removed later). Labels translate positionally
/// through the copy.
pub fn substitute_forward(program: &mut CfgProgram) {
    let mut i = 0;
    while i < program.actions.len() {
        let plan = {
            let a = &program.actions[i];
            let ok = matches!(&a.rhs, Rhs::Var(_))
                && !a.accumulate
                && a.alpha.is_one()
                && program.is_temp(&a.dst.name);
            if !ok {
                None
            } else {
                let Rhs::Var(src) = &a.rhs else { unreachable!() };
                if !a.dst.indices.same_letters(&src.indices) || src.name == a.dst.name {
                    None
                } else {
                    let a_name = a.dst.name.clone();
                    let tmp_name = src.name.clone();
                    let mut diverged = false;
                    let mut legal = true;
                    for act in &program.actions[i + 1..] {
                        let writes_a = act.dst.name == a_name;
                        let copy_back = act.dst.name == tmp_name
                            && !act.accumulate
                            && act.alpha.is_one()
                            && matches!(&act.rhs, Rhs::Var(v) if v.name == a_name);
                        if copy_back {
                            diverged = false;
                            continue;
                        }
                        let mentions_tmp = act.dst.name == tmp_name
                            || act.rhs.reads().iter().any(|r| r.name == tmp_name);
                        if mentions_tmp && (diverged || act.dst.name == tmp_name) {
                            legal = false;
                            break;
                        }
                        if writes_a {
                            diverged = true;
                        }
                    }
                    legal.then(|| {
                        (a_name, a.dst.indices.clone(), tmp_name, {
                            let Rhs::Var(src) = &a.rhs else { unreachable!() };
                            src.indices.clone()
                        })
                    })
                }
            }
        };
        let Some((a_name, a_order, tmp_name, tmp_order)) = plan else {
            i += 1;
            continue;
        };
        let translate = |r: &VarRef| -> VarRef {
            let letters: Vec<Letter> = tmp_order
                .letters()
                .iter()
                .map(|&copy_label| {
                    let a_dim = a_order.position(copy_label).unwrap();
                    r.indices.letters()[a_dim]
                })
                .collect();
            VarRef { name: tmp_name.clone(), indices: IndexString::from_letters(&letters) }
        };
        for act in &mut program.actions[i + 1..] {
            if act.dst.name == a_name {
                act.dst = translate(&act.dst);
            }
            let mut fix = |r: &mut VarRef| {
                if r.name == a_name {
                    *r = translate(r);
                }
            };
            match &mut act.rhs {
                Rhs::Var(v) => fix(v),
                Rhs::Log { left, right, .. } | Rhs::Product { left, right } => {
                    fix(left);
                    fix(right);
                }
                Rhs::IndexSum { child, .. } => fix(child),
            }
        }
        i += 1;
    }
}

/// Pass 4: when an action `A = tmp` follows the writes of a temporary,
/// retarget the whole write chain of `tmp` to `A` and drop the copy.
/// Legal when `tmp` is unused after the copy and `A` is untouched in
/// the span, except that an element-wise write of the chain may read
/// `A` in place.
pub fn substitute_backward(program: &mut CfgProgram) {
    let mut j = 0;
    while j < program.actions.len() {
        let candidate = {
            let copy = &program.actions[j];
            let Rhs::Var(src) = &copy.rhs else {
                j += 1;
                continue;
            };
            if copy.accumulate
                || !copy.alpha.is_one()
                || !program.is_temp(&src.name)
                || copy.dst.name == src.name
                || !copy.dst.indices.same_letters(&src.indices)
            {
                None
            } else {
                let tmp = src.name.clone();
                let a = copy.dst.name.clone();
                let start = program.actions.iter().position(|x| x.dst.name == tmp).unwrap();
                let used_after = program.actions[j + 1..].iter().any(|x| {
                    x.dst.name == tmp || x.rhs.reads().iter().any(|r| r.name == tmp)
                });
                let mut legal = start < j && !used_after;
                for s in &program.actions[start..j] {
                    if s.dst.name == a {
                        legal = false;
                    }
                    let reads_a = s.rhs.reads().iter().any(|r| r.name == a);
                    if reads_a {
                        // Only an element-wise write of the chain may
                        // read A in place.
                        let in_chain = s.dst.name == tmp;
                        let elementwise = matches!(s.rhs, Rhs::Var(_));
                        if !(in_chain && elementwise) {
                            legal = false;
                        }
                    }
                }
                legal.then(|| (start, j, tmp, a, src.indices.clone(), copy.dst.indices.clone()))
            }
        };
        let Some((start, copy_idx, tmp, a, tmp_order, a_order)) = candidate else {
            j += 1;
            continue;
        };
        // Letter translation through the copy: A's dim e (copy label
        // a_order[e]) corresponds to tmp's dim carrying the same copy
        // label, so a reference labelling tmp's dims re-labels A's.
        let translate = |r: &VarRef| -> VarRef {
            let labels = r.indices.letters();
            let out: Vec<Letter> = a_order
                .letters()
                .iter()
                .map(|&copy_label| labels[tmp_order.position(copy_label).unwrap()])
                .collect();
            VarRef { name: a.clone(), indices: IndexString::from_letters(&out) }
        };
        for s in &mut program.actions[start..copy_idx] {
            if s.dst.name == tmp {
                s.dst = translate(&s.dst);
            }
            let fix = |r: &mut VarRef| {
                if r.name == tmp {
                    *r = translate(r);
                }
            };
            match &mut s.rhs {
                Rhs::Var(v) => fix(v),
                Rhs::Log { left, right, .. } | Rhs::Product { left, right } => {
                    fix(left);
                    fix(right);
                }
                Rhs::IndexSum { child, .. } => fix(child),
            }
        }
        program.actions.remove(copy_idx);
        program.temps.remove(&tmp);
    }
}

/// Pass 5: removes exact self-copies (`A = A`) and writes to
/// temporaries that are never read.
pub fn remove_empty_statements(program: &mut CfgProgram) {
    loop {
        let before = program.actions.len();
        program.actions.retain(|a| {
            let self_copy = !a.accumulate
                && a.alpha.is_one()
                && matches!(&a.rhs, Rhs::Var(v) if v.name == a.dst.name && v.indices == a.dst.indices);
            !self_copy
        });
        let dead: Vec<usize> = program
            .actions
            .iter()
            .enumerate()
            .filter(|(i, a)| {
                program.is_temp(&a.dst.name)
                    && !program.actions[i + 1..]
                        .iter()
                        .any(|b| b.rhs.reads().iter().any(|r| r.name == a.dst.name))
            })
            .map(|(i, _)| i)
            .collect();
        for &i in dead.iter().rev() {
            let name = program.actions[i].dst.name.clone();
            program.actions.remove(i);
            if !program.actions.iter().any(|a| a.dst.name == name) {
                program.temps.remove(&name);
            }
        }
        if program.actions.len() == before {
            return;
        }
    }
}

/// Pass 6: merges `A = f(...)` into a later `B (+)= A`.
pub fn merge_actions(program: &mut CfgProgram) {
    merge_defs_into_uses(program, |_| true);
}

/// Pass 7: greedy first-fit of temporaries to buffers such that no two
/// simultaneously-live temporaries share one; each buffer is as large
/// as the largest temporary assigned to it (in elements).
pub fn buffer_plan(program: &CfgProgram) -> BufferPlan {
    // Live range of a temp: first write .. last read (inclusive).
    let mut ranges: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (i, a) in program.actions.iter().enumerate() {
        if program.is_temp(&a.dst.name) {
            let e = ranges.entry(a.dst.name.clone()).or_insert((i, i));
            e.1 = e.1.max(i);
        }
        for r in a.rhs.reads() {
            if program.is_temp(&r.name) {
                if let Some(e) = ranges.get_mut(&r.name) {
                    e.1 = e.1.max(i);
                }
            }
        }
    }
    let mut order: Vec<(&String, &(usize, usize))> = ranges.iter().collect();
    order.sort_by_key(|(name, &(start, _))| (start, (*name).clone()));
    let mut plan = BufferPlan::default();
    let mut buffer_ranges: Vec<Vec<(usize, usize)>> = Vec::new();
    for (name, &(start, end)) in order {
        let size = program.temps[name].layout.element_count();
        let overlap =
            |(s, e): (usize, usize), (s2, e2): (usize, usize)| s <= e2 && s2 <= e;
        let slot = (0..buffer_ranges.len())
            .find(|&b| buffer_ranges[b].iter().all(|&r| !overlap((start, end), r)));
        match slot {
            Some(b) => {
                buffer_ranges[b].push((start, end));
                plan.sizes[b] = plan.sizes[b].max(size);
                plan.assignment.insert(name.clone(), b);
            }
            None => {
                buffer_ranges.push(vec![(start, end)]);
                plan.sizes.push(size);
                plan.assignment.insert(name.clone(), buffer_ranges.len() - 1);
            }
        }
    }
    plan
}

/// Runs the full pass pipeline in the fixed order and attaches the
/// buffer plan.
pub fn run_passes(program: &mut CfgProgram) {
    merge_scalar_multiplications(program);
    let _ = liveness(program);
    substitute_forward(program);
    substitute_backward(program);
    remove_empty_statements(program);
    merge_actions(program);
    remove_empty_statements(program);
    program.buffers = Some(buffer_plan(program));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::ScalarCoeff;

    fn var(name: &str, idx: &str) -> VarRef {
        VarRef { name: name.to_owned(), indices: IndexString::new(idx).unwrap() }
    }

    fn temp_info(idx: &str, extents: &[usize]) -> TempInfo {
        let spp = SparsityPattern::dense(extents);
        let layout = assign_layout(extents, &spp, LayoutPolicy::BoundingBox).unwrap();
        TempInfo { indices: IndexString::new(idx).unwrap(), layout, spp }
    }

    fn copy(dst: VarRef, src: VarRef, alpha: f64, accumulate: bool) -> Action {
        Action {
            dst,
            accumulate,
            alpha: ScalarCoeff::literal(alpha),
            rhs: Rhs::Var(src),
        }
    }

    /// The running example: `C['ij'] <= 2 C + 0.5 A B` as initially
    /// lowered (a gemm temp, a scalar copy, the accumulation chain).
    fn gemm_example() -> CfgProgram {
        let desc = LogDescriptor {
            batch: vec![],
            m: vec![crate::logmap::LoopRange { letter: b'i', lo: 0, hi: 4 }],
            n: vec![crate::logmap::LoopRange { letter: b'j', lo: 0, hi: 4 }],
            k: vec![crate::logmap::LoopRange { letter: b'k', lo: 0, hi: 4 }],
            a_is_left: true,
            transpose_a: false,
            transpose_b: false,
            csc_b: false,
            s_count: 0,
            fused_count: 0,
            prefetch: None,
        };
        let mut temps = BTreeMap::new();
        for t in ["_t0", "_t1", "_t2", "_t3"] {
            temps.insert(t.to_owned(), temp_info("ij", &[4, 4]));
        }
        CfgProgram {
            actions: vec![
                Action {
                    dst: var("_t0", "ij"),
                    accumulate: false,
                    alpha: ScalarCoeff::one(),
                    rhs: Rhs::Log { desc, left: var("A", "ik"), right: var("B", "kj") },
                },
                copy(var("_t1", "ij"), var("_t0", "ij"), 0.5, false),
                copy(var("_t2", "ij"), var("C", "ij"), 2.0, false),
                copy(var("_t3", "ij"), var("_t2", "ij"), 1.0, false),
                copy(var("_t3", "ij"), var("_t1", "ij"), 1.0, true),
                copy(var("C", "ij"), var("_t3", "ij"), 1.0, false),
            ],
            temps,
            buffers: None,
        }
    }

    #[test]
    fn full_pipeline_collapses_to_two_actions() {
        // 2*C folds into 'C = 2C' and the gemm merges into 'C += 0.5 log'.
        let mut p = gemm_example();
        run_passes(&mut p);
        let dump = p.dump();
        assert_eq!(
            dump,
            "C['ij'] = 2 * C['ij']\nC['ij'] += 0.5 * log(A['ik'], B['kj'])\n"
        );
    }

    #[test]
    fn self_copy_is_removed() {
        let mut p = CfgProgram {
            actions: vec![copy(var("A", "ij"), var("A", "ij"), 1.0, false)],
            temps: BTreeMap::new(),
            buffers: None,
        };
        remove_empty_statements(&mut p);
        assert!(p.actions.is_empty());
    }

    #[test]
    fn merge_scalar_multiplications_folds_alpha() {
        let mut temps = BTreeMap::new();
        temps.insert("_t0".to_owned(), temp_info("ij", &[2, 2]));
        let mut p = CfgProgram {
            actions: vec![
                Action {
                    dst: var("_t0", "ij"),
                    accumulate: false,
                    alpha: ScalarCoeff::one(),
                    rhs: Rhs::Product { left: var("X", "i"), right: var("Y", "j") },
                },
                copy(var("Z", "ij"), var("_t0", "ij"), 2.0, false),
            ],
            temps,
            buffers: None,
        };
        merge_scalar_multiplications(&mut p);
        assert_eq!(p.actions.len(), 1);
        assert_eq!(p.actions[0].dst.name, "Z");
        assert_eq!(p.actions[0].alpha.literal, 2.0);
        assert!(matches!(p.actions[0].rhs, Rhs::Product { .. }));
    }

    #[test]
    fn substitute_forward_then_cleanup_matches_pipeline_shape() {
        // _t0 = C; _t0 += X; C = _t0  ==>  C += X.
        let mut temps = BTreeMap::new();
        temps.insert("_t0".to_owned(), temp_info("ij", &[2, 2]));
        let mut p = CfgProgram {
            actions: vec![
                copy(var("_t0", "ij"), var("C", "ij"), 1.0, false),
                copy(var("_t0", "ij"), var("X", "ij"), 1.0, true),
                copy(var("C", "ij"), var("_t0", "ij"), 1.0, false),
            ],
            temps,
            buffers: None,
        };
        substitute_forward(&mut p);
        remove_empty_statements(&mut p);
        assert_eq!(p.dump(), "C['ij'] += X['ij']\n");
    }

    #[test]
    fn buffer_plan_examples() {
        // Two temporaries with disjoint live ranges share one buffer of
        // the larger size; overlapping ranges get two buffers.
        let mut temps = BTreeMap::new();
        temps.insert("_t0".to_owned(), temp_info("i", &[100]));
        temps.insert("_t1".to_owned(), temp_info("i", &[80]));
        let disjoint = CfgProgram {
            actions: vec![
                copy(var("_t0", "i"), var("X", "i"), 1.0, false),
                copy(var("Y", "i"), var("_t0", "i"), 1.0, false),
                copy(var("_t1", "i"), var("X", "i"), 2.0, false),
                copy(var("Z", "i"), var("_t1", "i"), 1.0, false),
            ],
            temps: temps.clone(),
            buffers: None,
        };
        let plan = buffer_plan(&disjoint);
        assert_eq!(plan.sizes, vec![100]);
        assert_eq!(plan.assignment["_t0"], plan.assignment["_t1"]);

        let overlapping = CfgProgram {
            actions: vec![
                copy(var("_t0", "i"), var("X", "i"), 1.0, false),
                copy(var("_t1", "i"), var("X", "i"), 2.0, false),
                copy(var("Y", "i"), var("_t0", "i"), 1.0, false),
                copy(var("Z", "i"), var("_t1", "i"), 1.0, false),
            ],
            temps,
            buffers: None,
        };
        let plan = buffer_plan(&overlapping);
        assert_eq!(plan.sizes.len(), 2);
        assert_ne!(plan.assignment["_t0"], plan.assignment["_t1"]);

        let empty = CfgProgram::default();
        assert!(buffer_plan(&empty).sizes.is_empty());
    }

    #[test]
    fn liveness_marks_reads_below() {
        let mut temps = BTreeMap::new();
        temps.insert("_t0".to_owned(), temp_info("i", &[4]));
        let p = CfgProgram {
            actions: vec![
                copy(var("_t0", "i"), var("X", "i"), 1.0, false),
                copy(var("Y", "i"), var("_t0", "i"), 1.0, false),
                copy(var("Y", "i"), var("X", "i"), 1.0, true),
            ],
            temps,
            buffers: None,
        };
        let live = liveness(&p);
        assert!(live[1].contains("_t0"));
        assert!(!live[2].contains("_t0"));
        assert!(live[0].contains("X"));
    }

    #[test]
    fn passes_are_idempotent() {
        let mut p = gemm_example();
        run_passes(&mut p);
        let first = p.dump();
        let buffers = p.buffers.clone();
        run_passes(&mut p);
        assert_eq!(p.dump(), first);
        assert_eq!(p.buffers, buffers);
    }
}
