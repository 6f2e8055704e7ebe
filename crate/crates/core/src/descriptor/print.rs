use std::fmt::Write;

use super::{ComponentDescription, Value};

pub(super) fn value_text(v: &Value) -> String {
    match v {
        Value::Str(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
        Value::Int(i) => i.to_string(),
        // Debug keeps a `.` or exponent, so the text reads back as a real.
        Value::Real(r) => format!("{r:?}"),
        Value::Bool(b) => b.to_string(),
        Value::Ref(r) => format!("REF {r}"),
    }
}

fn write_node(out: &mut String, node: &ComponentDescription, depth: usize) {
    let pad = "  ".repeat(depth);
    let _ = write!(out, "{pad}{}", node.name);
    if let Some(p) = &node.extends {
        let _ = write!(out, " extends {p}");
    }
    if node.attributes.is_empty() && node.children.is_empty() {
        out.push_str(" {}\n");
        return;
    }
    out.push_str(" {\n");
    for (name, value) in &node.attributes {
        let _ = writeln!(out, "{pad}  {name} {};", value_text(value));
    }
    for child in node.children.values() {
        write_node(out, child, depth + 1);
    }
    let _ = writeln!(out, "{pad}}}");
}

/// Canonical text for one component: attributes first, then children,
/// two spaces of indent per level.
pub fn print(node: &ComponentDescription) -> String {
    let mut out = String::new();
    write_node(&mut out, node, 0);
    out
}

/// Canonical text for a list of top-level components, blank-line separated.
pub fn print_file(components: &[ComponentDescription]) -> String {
    components.iter().map(print).collect::<Vec<_>>().join("\n")
}
