//! The counting interpreter: executes planned kernels step by step
//! through layout-aware addressing, tallying hardware flops as the
//! loops run. The loop structure mirrors the emitted C code exactly, so
//! results agree bit for bit in the same precision.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Access, ExecError, KernelExec, Loop, Step, VarInfo};
use crate::index::colmajor_offset;
use crate::layout::MemoryLayout;

/// Element type of an execution: `f64` or `f32`.
pub trait Real: Copy + PartialEq + core::fmt::Debug {
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    /// Uniform value in [0, 1) from one generator output.
    fn unit(z: u64) -> Self;
    fn add(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn to_f64(self) -> f64;
    fn to_bits_u64(self) -> u64;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn unit(z: u64) -> Self {
        super::unit_f64(z)
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn unit(z: u64) -> Self {
        super::unit_f32(z)
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

/// One executable instance of a kernel: storage for every variable plus
/// bound scalar values. Distinct instances may run concurrently.
pub struct Instance<F: Real> {
    buffers: BTreeMap<String, Vec<F>>,
    bound: BTreeMap<String, bool>,
    pub scalars: BTreeMap<String, f64>,
}

impl<F: Real> Instance<F> {
    /// Allocates storage: constants are preloaded, temporaries zeroed,
    /// slots must be bound before execution.
    pub fn new(exec: &KernelExec) -> Self {
        let mut buffers = BTreeMap::new();
        let mut bound = BTreeMap::new();
        for (name, info) in &exec.vars {
            let mut buf = vec![F::ZERO; info.stored_len()];
            if let Some(values) = &info.constant {
                for (slot, &v) in buf.iter_mut().zip(values) {
                    *slot = F::from_f64(v);
                }
                bound.insert(name.clone(), true);
            } else {
                bound.insert(name.clone(), info.is_temp);
            }
            buffers.insert(name.clone(), buf);
        }
        Instance { buffers, bound, scalars: BTreeMap::new() }
    }

    /// Binds a tensor slot from a dense column-major grid over the
    /// tensor's shape.
    pub fn bind_dense(
        &mut self,
        exec: &KernelExec,
        name: &str,
        dense: &[F],
    ) -> Result<(), ExecError> {
        let info = exec
            .vars
            .get(name)
            .ok_or_else(|| ExecError::UnknownVariable { name: name.to_owned() })?;
        let expected: usize = info.shape.iter().product();
        if dense.len() != expected {
            return Err(ExecError::ShapeMismatch {
                name: name.to_owned(),
                expected,
                got: dense.len(),
            });
        }
        let buf = self.buffers.get_mut(name).unwrap();
        write_dense(info, dense, buf);
        self.bound.insert(name.to_owned(), true);
        Ok(())
    }

    /// Binds a slot directly with layout-formatted storage.
    pub fn bind_storage(
        &mut self,
        exec: &KernelExec,
        name: &str,
        storage: Vec<F>,
    ) -> Result<(), ExecError> {
        let info = exec
            .vars
            .get(name)
            .ok_or_else(|| ExecError::UnknownVariable { name: name.to_owned() })?;
        if storage.len() != info.stored_len() {
            return Err(ExecError::ShapeMismatch {
                name: name.to_owned(),
                expected: info.stored_len(),
                got: storage.len(),
            });
        }
        self.buffers.insert(name.to_owned(), storage);
        self.bound.insert(name.to_owned(), true);
        Ok(())
    }

    /// Reads a variable back as a dense column-major grid over its
    /// shape; slots outside the stored box read as zero.
    pub fn read_dense(&self, exec: &KernelExec, name: &str) -> Result<Vec<F>, ExecError> {
        let info = exec
            .vars
            .get(name)
            .ok_or_else(|| ExecError::UnknownVariable { name: name.to_owned() })?;
        let buf = &self.buffers[name];
        let len: usize = info.shape.iter().product();
        let mut out = vec![F::ZERO; len];
        let mut index = vec![0usize; info.shape.len()];
        crate::index::for_each_point(&info.shape, |p| {
            index.copy_from_slice(p);
            if let Ok(off) = info.layout.address(&index) {
                out[colmajor_offset(&info.shape, p)] = buf[off];
            }
        });
        Ok(out)
    }

    /// The raw stored buffer (layout-formatted).
    pub fn storage(&self, name: &str) -> Option<&[F]> {
        self.buffers.get(name).map(|b| b.as_slice())
    }
}

/// Writes a dense shape-grid through a layout into storage.
pub fn write_dense<F: Real>(info: &VarInfo, dense: &[F], buf: &mut [F]) {
    for slot in buf.iter_mut() {
        *slot = F::ZERO;
    }
    let mut index = vec![0usize; info.shape.len()];
    crate::index::for_each_point(&info.shape, |p| {
        index.copy_from_slice(p);
        if let Ok(off) = info.layout.address(&index) {
            buf[off] = dense[colmajor_offset(&info.shape, p)];
        }
    });
}

// The multiplier chain folds in the working precision, mirroring the
// emitted C expression `(real)lit * k->s1 * k->s2`.
fn alpha_value<F: Real>(
    alpha: &crate::ast::ScalarCoeff,
    scalars: &BTreeMap<String, f64>,
) -> Result<F, ExecError> {
    let mut v = F::from_f64(alpha.literal);
    for s in &alpha.symbols {
        let bound = scalars
            .get(s)
            .copied()
            .ok_or_else(|| ExecError::UnboundSlot { name: s.clone() })?;
        v = v.mul(F::from_f64(bound));
    }
    Ok(v)
}

/// Executes a kernel instance, returning the tallied hardware flops.
/// The tally always equals [`KernelExec::hardware_flops`].
pub fn execute<F: Real>(exec: &KernelExec, inst: &mut Instance<F>) -> Result<u64, ExecError> {
    for (name, bound) in &inst.bound {
        if !bound {
            return Err(ExecError::UnboundSlot { name: name.clone() });
        }
    }
    for s in &exec.scalars {
        if !inst.scalars.contains_key(s) {
            return Err(ExecError::UnboundSlot { name: s.clone() });
        }
    }
    let mut tally = 0u64;
    for step in &exec.steps {
        execute_step(exec, inst, step, &mut tally)?;
    }
    Ok(tally)
}

/// Iterates a loop list (outermost first), invoking the body with the
/// loop variable values.
fn nest(loops: &[Loop], ivs: &mut Vec<usize>, body: &mut impl FnMut(&mut Vec<usize>)) {
    fn rec(loops: &[Loop], d: usize, ivs: &mut Vec<usize>, body: &mut impl FnMut(&mut Vec<usize>)) {
        if d == loops.len() {
            body(ivs);
            return;
        }
        for i in loops[d].lo..loops[d].hi {
            ivs[d] = i;
            rec(loops, d + 1, ivs, body);
        }
    }
    rec(loops, 0, ivs, body);
}

fn read<F: Real>(buf: &[F], access: &Access, ivs: &[usize]) -> F {
    match access.offset(ivs) {
        Some(off) => buf[off],
        None => F::ZERO,
    }
}

fn execute_step<F: Real>(
    exec: &KernelExec,
    inst: &mut Instance<F>,
    step: &Step,
    tally: &mut u64,
) -> Result<(), ExecError> {
    match step {
        Step::Zero { var, len } => {
            let buf = inst.buffers.get_mut(var).unwrap();
            for slot in buf.iter_mut().take(*len) {
                *slot = F::ZERO;
            }
        }
        Step::CopyScaleAdd { loops, dst, src, alpha, accumulate } => {
            let alpha_v: F = alpha_value(alpha, &inst.scalars)?;
            let src_buf = inst.buffers[&src.var].clone();
            let dst_buf = inst.buffers.get_mut(&dst.var).unwrap();
            let mut ivs = vec![0usize; loops.len()];
            let apply_alpha = !alpha.is_one();
            let body_ops = u64::from(apply_alpha) + u64::from(*accumulate);
            nest(loops, &mut ivs, &mut |ivs| {
                let mut v = read(&src_buf, src, ivs);
                if apply_alpha {
                    v = v.mul(alpha_v);
                }
                let off = dst.offset(ivs).expect("destinations are unguarded");
                if *accumulate {
                    dst_buf[off] = dst_buf[off].add(v);
                } else {
                    dst_buf[off] = v;
                }
                *tally += body_ops;
            });
        }
        Step::Product { loops, dst, a, b, alpha, accumulate } => {
            let alpha_v: F = alpha_value(alpha, &inst.scalars)?;
            let a_buf = inst.buffers[&a.var].clone();
            let b_buf = inst.buffers[&b.var].clone();
            let dst_buf = inst.buffers.get_mut(&dst.var).unwrap();
            let apply_alpha = !alpha.is_one();
            let body_ops = 1 + u64::from(apply_alpha) + u64::from(*accumulate);
            let mut ivs = vec![0usize; loops.len()];
            nest(loops, &mut ivs, &mut |ivs| {
                let mut v = read(&a_buf, a, ivs).mul(read(&b_buf, b, ivs));
                if apply_alpha {
                    v = v.mul(alpha_v);
                }
                let off = dst.offset(ivs).expect("destinations are unguarded");
                if *accumulate {
                    dst_buf[off] = dst_buf[off].add(v);
                } else {
                    dst_buf[off] = v;
                }
                *tally += body_ops;
            });
        }
        Step::IndexSum { free, sum, dst, src, alpha, accumulate } => {
            let alpha_v: F = alpha_value(alpha, &inst.scalars)?;
            let src_buf = inst.buffers[&src.var].clone();
            let dst_buf = inst.buffers.get_mut(&dst.var).unwrap();
            let apply_alpha = !alpha.is_one();
            let epilogue = u64::from(apply_alpha) + u64::from(*accumulate);
            let mut ivs = vec![0usize; free.len() + sum.len()];
            let mut outer = vec![0usize; free.len()];
            nest(free, &mut outer, &mut |outer_ivs| {
                ivs[..free.len()].copy_from_slice(outer_ivs);
                let mut acc = F::ZERO;
                let mut inner = vec![0usize; sum.len()];
                nest(sum, &mut inner, &mut |inner_ivs| {
                    ivs[free.len()..].copy_from_slice(inner_ivs);
                    acc = acc.add(read(&src_buf, src, &ivs));
                    *tally += 1;
                });
                let mut v = acc;
                if apply_alpha {
                    v = v.mul(alpha_v);
                }
                let off = dst.offset(&ivs[..free.len()]).expect("destinations are unguarded");
                if *accumulate {
                    dst_buf[off] = dst_buf[off].add(v);
                } else {
                    dst_buf[off] = v;
                }
                *tally += epilogue;
            });
        }
        Step::Gemm { batch, n, m, k, dst, a, b, alpha, accumulate, .. } => {
            let alpha_v: F = alpha_value(alpha, &inst.scalars)?;
            let a_buf = inst.buffers[&a.var].clone();
            let b_buf = inst.buffers[&b.var].clone();
            let dst_buf = inst.buffers.get_mut(&dst.var).unwrap();
            let apply_alpha = !alpha.is_one();
            // A unit-multiplier accumulation seeds from the destination
            // so the k-chain covers the update.
            let seed_from_dst = !apply_alpha && *accumulate;
            let outer_len = batch.len() + n.len() + m.len();
            let outer: Vec<Loop> =
                batch.iter().chain(n.iter()).chain(m.iter()).cloned().collect();
            let mut ivs = vec![0usize; outer_len + k.len()];
            let mut outer_ivs = vec![0usize; outer_len];
            nest(&outer, &mut outer_ivs, &mut |o| {
                ivs[..outer_len].copy_from_slice(o);
                let off = dst.offset(&ivs[..outer_len]).expect("destinations are unguarded");
                let mut acc = if seed_from_dst { dst_buf[off] } else { F::ZERO };
                let mut inner = vec![0usize; k.len()];
                nest(k, &mut inner, &mut |ki| {
                    ivs[outer_len..].copy_from_slice(ki);
                    acc = acc.add(read(&a_buf, a, &ivs).mul(read(&b_buf, b, &ivs)));
                    *tally += 2;
                });
                if apply_alpha {
                    let v = acc.mul(alpha_v);
                    *tally += 1;
                    if *accumulate {
                        dst_buf[off] = dst_buf[off].add(v);
                        *tally += 1;
                    } else {
                        dst_buf[off] = v;
                    }
                } else {
                    dst_buf[off] = acc;
                }
            });
        }
        Step::CscGemm { m, col, row_range, dst, a, csc, alpha, accumulate, .. } => {
            // Loop slots: [col, m.., k]; the k slot holds the row index.
            let alpha_v: F = alpha_value(alpha, &inst.scalars)?;
            let info = &exec.vars[csc];
            let MemoryLayout::Csc(layout) = &info.layout else {
                return Err(ExecError::CscPlacement { name: csc.clone() });
            };
            let colptr = layout.colptr().to_vec();
            let rowidx = layout.rowidx().to_vec();
            let vals = inst.buffers[csc].clone();
            let a_buf = inst.buffers[&a.var].clone();
            let dst_buf = inst.buffers.get_mut(&dst.var).unwrap();
            let apply_alpha = !alpha.is_one();
            // Loop slots: [col, m.., k]; dst uses [col, m..].
            let mut ivs = vec![0usize; 2 + m.len()];
            for c in col.lo..col.hi {
                ivs[0] = c;
                if !*accumulate {
                    let mut mi = vec![0usize; m.len()];
                    nest(m, &mut mi, &mut |mv| {
                        ivs[1..1 + m.len()].copy_from_slice(mv);
                        let off = dst.offset(&ivs[..1 + m.len()]).unwrap();
                        dst_buf[off] = F::ZERO;
                    });
                }
                for e in colptr[c]..colptr[c + 1] {
                    let row = rowidx[e];
                    if row < row_range.0 || row >= row_range.1 {
                        continue;
                    }
                    ivs[1 + m.len()] = row;
                    let mut w = vals[e];
                    if apply_alpha {
                        w = w.mul(alpha_v);
                        *tally += 1;
                    }
                    let mut mi = vec![0usize; m.len()];
                    nest(m, &mut mi, &mut |mv| {
                        ivs[1..1 + m.len()].copy_from_slice(mv);
                        let off = dst.offset(&ivs[..1 + m.len()]).unwrap();
                        dst_buf[off] = dst_buf[off].add(read(&a_buf, a, &ivs).mul(w));
                        *tally += 2;
                    });
                }
            }
        }
    }
    Ok(())
}
