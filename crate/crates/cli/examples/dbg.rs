use einkern::corpus;
use einkern_core::ast::{deduce_indices, propagate_patterns, NodeKind};
use einkern_core::logmap::{self, MapperEnv};
use einkern_core::strength;
use einkern_core::layout::{assign_layout, LayoutPolicy};

fn main() {
    let mut fam = corpus::adertet(4, 8, true).unwrap();
    // assign layouts like the pipeline default ladder (aligned bbox v=1)
    let names: Vec<String> = fam.tensors.keys().cloned().collect();
    for name in names {
        let t = fam.tensors[&name].clone();
        let layout = assign_layout(t.shape(), t.spp(), LayoutPolicy::Aligned(1)).unwrap();
        fam.tensors.insert(name.clone(), t.with_layout(layout));
    }
    let kernel = fam.kernels.iter().find(|k| k.name == "derivative1").unwrap();
    let stmt = &kernel.statements[0];
    let mut expr = stmt.desugared_expr();
    deduce_indices(&mut expr, &stmt.target_indices, &fam.tensors).unwrap();
    propagate_patterns(&mut expr, &fam.tensors).unwrap();
    // reduce each einsum
    fn reduce(node: einkern_core::ast::Node) -> einkern_core::ast::Node {
        match node.kind {
            NodeKind::Einsum { children } => {
                let kids: Vec<_> = children.into_iter().map(reduce).collect();
                let ops: Vec<_> = kids.iter().map(|c| (c, c.effective_spp().unwrap())).collect();
                let mut red = strength::reduce(&ops, &node.indices).unwrap();
                println!("einsum {} -> paren {} cost {}", node.indices, strength::parenthesization(&red.tree), red.schedule.cost);
                red.tree.spp = node.spp.clone();
                red.tree
            }
            NodeKind::Add { children } => einkern_core::ast::Node {
                kind: NodeKind::Add { children: children.into_iter().map(reduce).collect() },
                indices: node.indices, spp: node.spp, eqspp: node.eqspp,
            },
            other => einkern_core::ast::Node { kind: other, indices: node.indices, spp: node.spp, eqspp: node.eqspp },
        }
    }
    let reduced = reduce(expr);
    let tree = logmap::find_contractions(reduced);
    fn show(n: &einkern_core::ast::Node, d: usize) {
        let pad = "  ".repeat(d);
        match &n.kind {
            NodeKind::Leaf { tensor } => println!("{pad}leaf {tensor}[{}]", n.indices),
            NodeKind::Contraction { summed, .. } => {
                println!("{pad}contraction [{}] summed {:?}", n.indices, summed.iter().map(|&l| l as char).collect::<Vec<_>>());
            }
            k => println!("{pad}{:?} [{}]", std::mem::discriminant(k), n.indices),
        }
        for c in n.children() { show(c, d+1); }
    }
    show(&tree, 0);
    let env = MapperEnv { tensors: &fam.tensors, temp_alignment: 1 };
    let mut t = tree;
    match logmap::optimize_permutations(&mut t, &stmt.target, &stmt.target_indices, &env) {
        Ok(c) => println!("mapped ok {:?}", c),
        Err(e) => println!("MAP ERROR: {e}"),
    }
}
