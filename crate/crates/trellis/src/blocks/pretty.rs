//! Rendering block trees as indented text, one node per line.

use std::fmt::Write;

use super::{Block, BlockKind, Source, Wire};

pub(crate) fn dump(root: &Block) -> String {
    let mut out = String::new();
    write_node(&mut out, root, "", 0);
    out
}

fn write_node(out: &mut String, b: &Block, role: &str, indent: usize) {
    let pad = "  ".repeat(indent);
    let role = if role.is_empty() { String::new() } else { format!("{role} = ") };
    let ty = match (b.in_type(), b.out_type()) {
        (Some(i), Some(o)) => format!("{i} -> {o}"),
        _ => "untyped".to_string(),
    };
    let _ = writeln!(out, "{pad}{role}{}: {ty}", label(b));
    match &b.kind {
        BlockKind::Pipe(a, c) => {
            write_node(out, a, "", indent + 1);
            write_node(out, c, "", indent + 1);
        }
        BlockKind::Record(fields) => {
            for (name, blk) in fields {
                write_node(out, blk, name, indent + 1);
            }
        }
        BlockKind::OneOf { cases, .. } => {
            for (key, blk) in cases {
                write_node(out, blk, &key.to_string(), indent + 1);
            }
        }
        BlockKind::Optional(body) => write_node(out, body, "", indent + 1),
        BlockKind::AllOf(children) => {
            for c in children {
                write_node(out, c, "", indent + 1);
            }
        }
        BlockKind::Map(f) | BlockKind::Reduce(f) | BlockKind::ZipWith(f) => {
            write_node(out, f, "", indent + 1);
        }
        BlockKind::Fold { step, init } => {
            write_node(out, init, "init", indent + 1);
            write_node(out, step, "step", indent + 1);
        }
        BlockKind::Composition(graph) => {
            for (i, node) in graph.nodes.iter().enumerate() {
                let role = format!("n{i} <- {}", wires(&node.reads));
                write_node(out, &node.block, &role, indent + 1);
            }
            let pad = "  ".repeat(indent + 1);
            let _ = writeln!(out, "{pad}output <- {}", wires(&graph.output));
        }
        BlockKind::Scalar(_)
        | BlockKind::TensorLit(_)
        | BlockKind::Function(_)
        | BlockKind::InputTransform { .. }
        | BlockKind::Sum
        | BlockKind::Broadcast
        | BlockKind::Zeros(_)
        | BlockKind::ForwardRef(_) => {}
    }
}

pub(crate) fn label(b: &Block) -> String {
    match &b.kind {
        BlockKind::Scalar(dt) => format!("scalar {dt}"),
        BlockKind::TensorLit(tt) => format!("tensor {tt}"),
        BlockKind::Function(op) => format!("op {}", op.name),
        BlockKind::InputTransform { name, .. } => format!("transform {name}"),
        BlockKind::Pipe(..) => "pipe".to_string(),
        BlockKind::Record(_) => "record".to_string(),
        BlockKind::OneOf { key_name, .. } => format!("one_of by {key_name}"),
        BlockKind::Optional(_) => "optional".to_string(),
        BlockKind::AllOf(_) => "all_of".to_string(),
        BlockKind::Map(_) => "map".to_string(),
        BlockKind::Fold { .. } => "fold".to_string(),
        BlockKind::Reduce(_) => "reduce".to_string(),
        BlockKind::Sum => "sum".to_string(),
        BlockKind::ZipWith(_) => "zip_with".to_string(),
        BlockKind::Broadcast => "broadcast".to_string(),
        BlockKind::Zeros(t) => format!("zeros {t}"),
        BlockKind::Composition(_) => "composition".to_string(),
        BlockKind::ForwardRef(weak) => match weak.upgrade() {
            Some(inner) => format!("ref {}", inner.name),
            None => "ref <dropped>".to_string(),
        },
    }
}

fn wires(reads: &[Wire]) -> String {
    if reads.is_empty() {
        return "nothing".to_string();
    }
    reads
        .iter()
        .map(|w| {
            let base = match w.src {
                Source::Input => "input".to_string(),
                Source::Node(j) => format!("n{j}"),
            };
            match w.field {
                None => base,
                Some(i) => format!("{base}.{i}"),
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}
