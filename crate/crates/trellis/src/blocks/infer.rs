//! Type inference over the lowered arena.
//!
//! Cells start from the seeds lowering planted (plus any declared output
//! types) and constraint rules copy types across edges until nothing
//! changes. Cells only ever go from unknown to known, so the fixpoint
//! terminates. Where context leaves a type genuinely open, a small set of
//! defaults applies (a function block's canonical flat input, void for
//! pure-source aggregates), then propagation resumes. A final pass
//! validates every node and writes the types back into the blocks.

use crate::error::{Error, Result};
use crate::types::BlockType;

use super::lower::{AKind, Arena, Cells};
use super::{Source, Wire};

pub(crate) fn infer(arena: &mut Arena) -> Result<()> {
    loop {
        run_fixpoint(arena)?;
        if !apply_defaults(arena)? {
            break;
        }
    }
    finalize(arena)?;
    write_back(arena);
    Ok(())
}

fn run_fixpoint(arena: &mut Arena) -> Result<()> {
    loop {
        let mut changed = false;
        for id in 0..arena.nodes.len() {
            changed |= step(arena, id)?;
        }
        if !changed {
            return Ok(());
        }
    }
}

/// Copies a known type from either cell to the other.
fn link(cells: &mut Cells, a: usize, b: usize, path: &str) -> Result<bool> {
    if let Some(t) = cells.get(a).cloned() {
        return cells.set(b, t, path);
    }
    if let Some(t) = cells.get(b).cloned() {
        return cells.set(a, t, path);
    }
    Ok(false)
}

fn step(arena: &mut Arena, id: usize) -> Result<bool> {
    let path = arena.nodes[id].path.clone();
    let in_cell = arena.nodes[id].in_cell;
    let out_cell = arena.nodes[id].out_cell;
    let mut changed = false;
    // Child cell accessors keep this readable; the kind is matched by
    // cloning out the child ids only.
    macro_rules! cin {
        ($c:expr) => {
            arena.nodes[$c].in_cell
        };
    }
    macro_rules! cout {
        ($c:expr) => {
            arena.nodes[$c].out_cell
        };
    }
    match &arena.nodes[id].kind {
        AKind::Scalar
        | AKind::TensorLit
        | AKind::InputTransform
        | AKind::Zeros
        | AKind::Function(_)
        | AKind::ForwardRef => {}

        AKind::Pipe(a, b) => {
            let (a, b) = (*a, *b);
            changed |= link(&mut arena.cells, in_cell, cin!(a), &path)?;
            changed |= link(&mut arena.cells, out_cell, cout!(b), &path)?;
            let b_in_is_void = arena.cells.get(cin!(b)) == Some(&BlockType::Void);
            if !b_in_is_void {
                let bp = arena.nodes[b].path.clone();
                changed |= link(&mut arena.cells, cout!(a), cin!(b), &bp)?;
            }
        }

        AKind::Record(children) => {
            let children = children.clone();
            let outs: Vec<Option<BlockType>> =
                children.iter().map(|&c| arena.cells.get(cout!(c)).cloned()).collect();
            if outs.iter().all(|t| t.is_some()) {
                let tuple = BlockType::Tuple(outs.into_iter().map(|t| t.unwrap()).collect());
                changed |= arena.cells.set(out_cell, tuple, &path)?;
            } else if let Some(BlockType::Tuple(ts)) = arena.cells.get(out_cell).cloned() {
                if ts.len() == children.len() {
                    for (&c, t) in children.iter().zip(ts) {
                        let cp = arena.nodes[c].path.clone();
                        changed |= arena.cells.set(cout!(c), t, &cp)?;
                    }
                }
            }
        }

        AKind::OneOf(cases) => {
            let cases: Vec<usize> = cases.iter().map(|(_, c)| *c).collect();
            for c in cases {
                let cp = arena.nodes[c].path.clone();
                changed |= link(&mut arena.cells, out_cell, cout!(c), &cp)?;
            }
        }

        AKind::Optional(c) => {
            let c = *c;
            changed |= link(&mut arena.cells, out_cell, cout!(c), &path)?;
        }

        AKind::AllOf(children) => {
            let children = children.clone();
            for &c in &children {
                if arena.cells.get(cin!(c)) == Some(&BlockType::Void) {
                    continue;
                }
                let cp = arena.nodes[c].path.clone();
                changed |= link(&mut arena.cells, in_cell, cin!(c), &cp)?;
            }
            let outs: Vec<Option<BlockType>> =
                children.iter().map(|&c| arena.cells.get(cout!(c)).cloned()).collect();
            if outs.iter().all(|t| t.is_some()) {
                let tuple = BlockType::Tuple(outs.into_iter().map(|t| t.unwrap()).collect());
                changed |= arena.cells.set(out_cell, tuple, &path)?;
            }
        }

        AKind::Map(f) => {
            let f = *f;
            match arena.cells.get(in_cell).cloned() {
                Some(BlockType::Input) => {
                    changed |= arena.cells.set(cin!(f), BlockType::Input, &path)?;
                }
                Some(BlockType::Seq(t)) => {
                    changed |= arena.cells.set(cin!(f), *t, &path)?;
                }
                _ => {}
            }
            if let Some(t) = arena.cells.get(cin!(f)).cloned() {
                if t != BlockType::Input {
                    changed |= arena.cells.set(in_cell, BlockType::seq(t), &path)?;
                }
            }
            if let Some(t) = arena.cells.get(cout!(f)).cloned() {
                changed |= arena.cells.set(out_cell, BlockType::seq(t), &path)?;
            }
            if let Some(BlockType::Seq(u)) = arena.cells.get(out_cell).cloned() {
                changed |= arena.cells.set(cout!(f), *u, &path)?;
            }
        }

        AKind::Fold { step: g, init: z } => {
            let (g, z) = (*g, *z);
            changed |= link(&mut arena.cells, out_cell, cout!(z), &path)?;
            changed |= link(&mut arena.cells, out_cell, cout!(g), &path)?;
            if let Some(BlockType::Tuple(st)) = arena.cells.get(cin!(g)).cloned() {
                if st.len() == 2 {
                    let (s, t) = (st[0].clone(), st[1].clone());
                    changed |= arena.cells.set(out_cell, s, &path)?;
                    if t != BlockType::Input {
                        changed |= arena.cells.set(in_cell, BlockType::seq(t), &path)?;
                    }
                }
            }
            let state = arena.cells.get(out_cell).cloned();
            let elem = match arena.cells.get(in_cell) {
                Some(BlockType::Seq(t)) => Some((**t).clone()),
                Some(BlockType::Input) => Some(BlockType::Input),
                _ => None,
            };
            if let (Some(s), Some(t)) = (state, elem) {
                changed |= arena.cells.set(cin!(g), BlockType::tuple(vec![s, t]), &path)?;
            }
        }

        AKind::Reduce(g) => {
            let g = *g;
            changed |= link(&mut arena.cells, out_cell, cout!(g), &path)?;
            if let Some(BlockType::Seq(t)) = arena.cells.get(in_cell).cloned() {
                let tt = (*t).clone();
                changed |= arena.cells.set(out_cell, tt.clone(), &path)?;
                changed |=
                    arena.cells.set(cin!(g), BlockType::tuple(vec![tt.clone(), tt]), &path)?;
            }
            if let Some(BlockType::Tuple(ab)) = arena.cells.get(cin!(g)).cloned() {
                if ab.len() == 2 && ab[0] == ab[1] {
                    changed |= arena.cells.set(in_cell, BlockType::seq(ab[0].clone()), &path)?;
                    changed |= arena.cells.set(out_cell, ab[0].clone(), &path)?;
                }
            }
        }

        AKind::Sum => {
            match arena.cells.get(in_cell).cloned() {
                Some(BlockType::Seq(t)) => {
                    if matches!(*t, BlockType::Tensor(_)) {
                        changed |= arena.cells.set(out_cell, *t, &path)?;
                    }
                }
                Some(BlockType::Tuple(ts)) => {
                    if let Some(first) = ts.first() {
                        if matches!(first, BlockType::Tensor(_))
                            && ts.iter().all(|t| t == first)
                        {
                            changed |= arena.cells.set(out_cell, first.clone(), &path)?;
                        }
                    }
                }
                _ => {}
            }
        }

        AKind::ZipWith(f) => {
            let f = *f;
            if let Some(BlockType::Tuple(seqs)) = arena.cells.get(in_cell).cloned() {
                let elems: Option<Vec<BlockType>> = seqs
                    .iter()
                    .map(|s| match s {
                        BlockType::Seq(t) => Some((**t).clone()),
                        _ => None,
                    })
                    .collect();
                if let Some(elems) = elems {
                    changed |= arena.cells.set(cin!(f), BlockType::Tuple(elems), &path)?;
                }
            }
            if let Some(BlockType::Tuple(ts)) = arena.cells.get(cin!(f)).cloned() {
                let seqs = BlockType::Tuple(ts.into_iter().map(BlockType::seq).collect());
                changed |= arena.cells.set(in_cell, seqs, &path)?;
            }
            if let Some(t) = arena.cells.get(cout!(f)).cloned() {
                changed |= arena.cells.set(out_cell, BlockType::seq(t), &path)?;
            }
            if let Some(BlockType::Seq(u)) = arena.cells.get(out_cell).cloned() {
                changed |= arena.cells.set(cout!(f), *u, &path)?;
            }
        }

        AKind::Broadcast => {
            if let Some(t) = arena.cells.get(in_cell).cloned() {
                changed |= arena.cells.set(out_cell, BlockType::seq(t), &path)?;
            }
            if let Some(BlockType::Seq(t)) = arena.cells.get(out_cell).cloned() {
                changed |= arena.cells.set(in_cell, *t, &path)?;
            }
        }

        AKind::Composition { nodes, output } => {
            let nodes = nodes.clone();
            let output = output.clone();
            for (c, reads) in &nodes {
                let c = *c;
                let cp = arena.nodes[c].path.clone();
                if reads.is_empty() {
                    changed |= arena.cells.set(cin!(c), BlockType::Void, &cp)?;
                    continue;
                }
                let tys: Option<Vec<BlockType>> = reads
                    .iter()
                    .map(|w| wire_type(arena, id, &nodes, w))
                    .collect::<Result<Option<Vec<_>>>>()?;
                if let Some(tys) = tys {
                    let t = if tys.len() == 1 {
                        tys.into_iter().next().unwrap()
                    } else {
                        BlockType::Tuple(tys)
                    };
                    changed |= arena.cells.set(cin!(c), t, &cp)?;
                }
                if reads.len() == 1 && reads[0] == Wire::input() {
                    if let Some(t) = arena.cells.get(cin!(c)).cloned() {
                        changed |= arena.cells.set(in_cell, t, &path)?;
                    }
                }
            }
            let tys: Option<Vec<BlockType>> = output
                .iter()
                .map(|w| wire_type(arena, id, &nodes, w))
                .collect::<Result<Option<Vec<_>>>>()?;
            if let Some(tys) = tys {
                let t = if tys.len() == 1 {
                    tys.into_iter().next().unwrap()
                } else {
                    BlockType::Tuple(tys)
                };
                changed |= arena.cells.set(out_cell, t, &path)?;
            }
        }
    }
    Ok(changed)
}

/// The type carried by one composition wire, if known yet. Projections on
/// known non-tuple types are errors.
fn wire_type(
    arena: &Arena,
    comp_id: usize,
    nodes: &[(usize, Vec<Wire>)],
    w: &Wire,
) -> Result<Option<BlockType>> {
    let base = match w.src {
        Source::Input => arena.cells.get(arena.nodes[comp_id].in_cell),
        Source::Node(j) => arena.cells.get(arena.nodes[nodes[j].0].out_cell),
    };
    let Some(base) = base else { return Ok(None) };
    match w.field {
        None => Ok(Some(base.clone())),
        Some(i) => match base {
            BlockType::Tuple(ts) => ts.get(i).cloned().map(Some).ok_or_else(|| {
                Error::TypeMismatch {
                    location: arena.nodes[comp_id].path.clone(),
                    expected: format!("a tuple with more than {i} fields"),
                    found: base.to_string(),
                }
            }),
            other => Err(Error::TypeMismatch {
                location: arena.nodes[comp_id].path.clone(),
                expected: "a tuple to project a field from".to_string(),
                found: other.to_string(),
            }),
        },
    }
}

/// Fills types that context leaves open. Returns whether anything changed.
fn apply_defaults(arena: &mut Arena) -> Result<bool> {
    let mut changed = false;
    for id in 0..arena.nodes.len() {
        let path = arena.nodes[id].path.clone();
        let in_cell = arena.nodes[id].in_cell;
        if arena.cells.get(in_cell).is_some() {
            continue;
        }
        match &arena.nodes[id].kind {
            // A function whose input nothing pins down takes the canonical
            // flat form of its signature.
            AKind::Function(op) => {
                let t = if op.inputs.len() == 1 {
                    BlockType::Tensor(op.inputs[0].clone())
                } else {
                    BlockType::Tuple(
                        op.inputs.iter().map(|t| BlockType::Tensor(t.clone())).collect(),
                    )
                };
                changed |= arena.cells.set(in_cell, t, &path)?;
            }
            // A map whose element block reads host data maps over a host
            // list.
            AKind::Map(f) => {
                if arena.cells.get(arena.nodes[*f].in_cell) == Some(&BlockType::Input) {
                    changed |= arena.cells.set(in_cell, BlockType::Input, &path)?;
                }
            }
            // A fan-out of pure sources consumes nothing.
            AKind::AllOf(children) => {
                let all_void = children
                    .iter()
                    .all(|&c| arena.cells.get(arena.nodes[c].in_cell) == Some(&BlockType::Void));
                if all_void {
                    changed |= arena.cells.set(in_cell, BlockType::Void, &path)?;
                }
            }
            // A composition in which no wire touches the input consumes
            // nothing (reported as a warning).
            AKind::Composition { nodes, output } => {
                let reads_input = nodes
                    .iter()
                    .flat_map(|(_, reads)| reads.iter())
                    .chain(output.iter())
                    .any(|w| w.src == Source::Input);
                if !reads_input {
                    changed |= arena.cells.set(in_cell, BlockType::Void, &path)?;
                    arena
                        .warnings
                        .push(format!("{path}: composition never reads its input"));
                }
            }
            _ => {}
        }
    }
    Ok(changed)
}

/// Validates every node now that the fixpoint has settled, reporting the
/// first underdetermined cell or structural mismatch.
fn finalize(arena: &Arena) -> Result<()> {
    for node in &arena.nodes {
        let get = |c: usize| arena.cells.get(c);
        let known = |c: usize| -> Result<&BlockType> {
            get(c).ok_or_else(|| Error::Underdetermined { location: node.path.clone() })
        };
        let in_ty = known(node.in_cell)?;
        let out_ty = known(node.out_cell)?;
        let mismatch = |expected: String, found: &BlockType| Error::TypeMismatch {
            location: node.path.clone(),
            expected,
            found: found.to_string(),
        };
        match &node.kind {
            AKind::Function(op) => {
                let sig = || {
                    format!(
                        "({})",
                        op.inputs.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
                    )
                };
                match in_ty.flatten_tensors() {
                    Some(flat) if flat == op.inputs => {}
                    _ => {
                        return Err(mismatch(
                            format!("tensors flattening to {} for operation {}", sig(), op.name),
                            in_ty,
                        ))
                    }
                }
            }
            AKind::Map(f) => {
                let f_in = known(arena.nodes[*f].in_cell)?;
                match in_ty {
                    BlockType::Input => {
                        if *f_in != BlockType::Input {
                            return Err(mismatch("input (host list elements)".into(), f_in));
                        }
                    }
                    BlockType::Seq(t) => {
                        if f_in != t.as_ref() {
                            return Err(mismatch(format!("sequence of {f_in}"), in_ty));
                        }
                    }
                    other => return Err(mismatch("seq<_> or input".into(), other)),
                }
            }
            AKind::Fold { step: g, init: z } => {
                let z_in = known(arena.nodes[*z].in_cell)?;
                if *z_in != BlockType::Void {
                    return Err(Error::InvalidBlock {
                        location: arena.nodes[*z].path.clone(),
                        message: format!(
                            "a fold initializer consumes nothing, but this one wants {z_in}"
                        ),
                    });
                }
                let g_in = known(arena.nodes[*g].in_cell)?;
                let elem = match in_ty {
                    BlockType::Seq(t) => t.as_ref().clone(),
                    BlockType::Input => BlockType::Input,
                    other => return Err(mismatch("seq<_> or input".into(), other)),
                };
                let want = BlockType::tuple(vec![out_ty.clone(), elem]);
                if *g_in != want {
                    return Err(mismatch(want.to_string(), g_in));
                }
            }
            AKind::Reduce(g) => {
                let g_in = known(arena.nodes[*g].in_cell)?;
                let want = BlockType::tuple(vec![out_ty.clone(), out_ty.clone()]);
                if *g_in != want || *in_ty != BlockType::seq(out_ty.clone()) {
                    return Err(mismatch(
                        format!("seq<{out_ty}> combined pairwise by {want}"),
                        in_ty,
                    ));
                }
            }
            AKind::Sum => {
                let ok = match in_ty {
                    BlockType::Seq(t) => matches!(**t, BlockType::Tensor(_)),
                    BlockType::Tuple(ts) => {
                        !ts.is_empty()
                            && matches!(ts[0], BlockType::Tensor(_))
                            && ts.iter().all(|t| *t == ts[0])
                    }
                    _ => false,
                };
                if !ok {
                    return Err(mismatch(
                        "seq<tensor> or a uniform tuple of tensors".into(),
                        in_ty,
                    ));
                }
            }
            AKind::ZipWith(f) => {
                let ok = matches!(in_ty, BlockType::Tuple(ts)
                    if !ts.is_empty() && ts.iter().all(|t| matches!(t, BlockType::Seq(_))));
                if !ok {
                    return Err(mismatch("a tuple of sequences".into(), in_ty));
                }
                known(arena.nodes[*f].in_cell)?;
            }
            AKind::Optional(_) => {
                if !out_ty.is_tensor_only() {
                    return Err(Error::InvalidBlock {
                        location: node.path.clone(),
                        message: format!(
                            "optional substitutes zeros for null, so its body must \
                             produce tensors only, not {out_ty}"
                        ),
                    });
                }
            }
            AKind::Pipe(a, b) => {
                let a_out = known(arena.nodes[*a].out_cell)?;
                let b_in = known(arena.nodes[*b].in_cell)?;
                if b_in != a_out && *b_in != BlockType::Void {
                    return Err(mismatch(a_out.to_string(), b_in));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn write_back(arena: &Arena) {
    for node in &arena.nodes {
        let in_ty = arena.cells.get(node.in_cell).cloned();
        let out_ty = arena.cells.get(node.out_cell).cloned();
        if let (Some(i), Some(o)) = (in_ty, out_ty) {
            *node.ty_cell.borrow_mut() = Some((i, o));
        }
    }
}
