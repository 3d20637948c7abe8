//! JSON report assembly: per-kernel flop counters, actions, chosen
//! descriptors, buffers, and prefetch annotations, plus a per-tensor
//! layout summary and the counting conventions.

use einkern_core::ast::{Diagnostic, Family};
use einkern_core::layout::MemoryLayout;
use serde_json::{json, Value};

use crate::pipeline::{CompiledKernel, PipelineConfig};

pub fn build(
    family: &Family,
    kernels: &[CompiledKernel],
    warnings: &[Diagnostic],
    config: &PipelineConfig,
) -> Value {
    let layouts: Vec<Value> = family
        .tensors
        .iter()
        .map(|(name, t)| {
            let layout = t.layout().expect("layouts assigned");
            let mut entry = json!({
                "tensor": name,
                "shape": t.shape(),
                "variant": layout.variant_name(),
                "elements": layout.element_count(),
            });
            match layout {
                MemoryLayout::DenseColMajor(b) | MemoryLayout::BoundingBox(b) => {
                    entry["intervals"] = json!(b
                        .intervals()
                        .iter()
                        .map(|&(lo, hi)| json!([lo, hi]))
                        .collect::<Vec<_>>());
                    entry["strides"] = json!(b.strides());
                    if b.alignment() > 1 {
                        entry["alignment"] = json!(b.alignment());
                    }
                }
                MemoryLayout::Csc(c) => {
                    entry["nnz"] = json!(c.nnz());
                }
            }
            entry
        })
        .collect();

    let kernels_json: Vec<Value> = kernels
        .iter()
        .map(|k| {
            let buffers = k.exec.buffer_plan.as_ref().map(|p| {
                json!({
                    "count": p.sizes.len(),
                    "sizes_elements": p.sizes,
                    "assignment": p.assignment,
                })
            });
            json!({
                "kernel": k.name,
                "nonzero_flops": k.exec.nonzero_flops,
                "hardware_flops": k.exec.hardware_flops,
                "dense_hardware_flops": k.dense_hardware_flops,
                "actions": k.program.dump().lines().collect::<Vec<_>>(),
                "backends": k.exec.action_summaries,
                "descriptors": k
                    .descriptors
                    .iter()
                    .map(|(n, c)| json!({"notation": n, "cost": c}))
                    .collect::<Vec<_>>(),
                "buffers": buffers,
                "prefetch": k.prefetch,
            })
        })
        .collect();

    json!({
        "family": family.name,
        "precision": match config.precision {
            einkern_core::codegen::c99::Precision::F64 => "double",
            einkern_core::codegen::c99::Precision::F32 => "single",
        },
        "alignment": config.alignment,
        "conventions": {
            "hardware_flops": "gemm counts 2*M*N*K per batch iteration with padded zeros included and the alpha/beta epilogue excluded; csc gemm counts 2*nnz_in_range*M; copyscaleadd counts one per element touched; generic loops count body executions times body operations",
            "nonzero_flops": "minimal formula-sequence cost under the sparse counting rules (multiplications = nonzeros of each product, additions = nonzeros in minus nonzeros out), plus scalar multiplications and merged additions",
            "dense_hardware_flops": "hardware flops of the same kernels compiled with every sparsity pattern dense",
        },
        "tensors": layouts,
        "kernels": kernels_json,
        "warnings": warnings.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
    })
}
