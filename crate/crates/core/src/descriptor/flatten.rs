use indexmap::IndexMap;

use super::{ComponentDescription, DescriptorError};

/// Replaces every `extends` by a deep copy of its prototype with the node's
/// own entries laid over it. An overriding attribute keeps the prototype's
/// position; new entries are appended in source order. A child that matches
/// a prototype child by name and has no `extends` of its own is merged into
/// it; a child that names a prototype replaces it.
pub fn resolve_extends(
    tree: &ComponentDescription,
    prototypes: &IndexMap<String, ComponentDescription>,
) -> Result<ComponentDescription, DescriptorError> {
    Flattener { prototypes }.flatten(tree, &mut Vec::new(), &tree.name)
}

struct Flattener<'a> {
    prototypes: &'a IndexMap<String, ComponentDescription>,
}

impl Flattener<'_> {
    /// `chain` holds the prototypes being expanded, for cycle reports.
    fn flatten(&self, node: &ComponentDescription, chain: &mut Vec<String>, at: &str) -> Result<ComponentDescription, DescriptorError> {
        let base = match &node.extends {
            None => ComponentDescription { name: node.name.clone(), pos: node.pos, ..Default::default() },
            Some(p) => {
                if let Some(start) = chain.iter().position(|c| c == p) {
                    let mut cycle = chain[start..].to_vec();
                    cycle.push(p.clone());
                    return Err(DescriptorError::ExtendsCycle { cycle });
                }
                let proto = self.prototypes.get(p).ok_or_else(|| DescriptorError::UnknownPrototype {
                    node: at.to_string(),
                    prototype: p.clone(),
                })?;
                chain.push(p.clone());
                let mut base = self.flatten(proto, chain, at);
                chain.pop();
                if let Ok(b) = &mut base {
                    b.name = node.name.clone();
                    b.pos = node.pos;
                }
                base?
            }
        };
        self.overlay(base, node, chain, at)
    }

    fn overlay(
        &self,
        mut base: ComponentDescription,
        own: &ComponentDescription,
        chain: &mut Vec<String>,
        at: &str,
    ) -> Result<ComponentDescription, DescriptorError> {
        for (name, value) in &own.attributes {
            base.children.shift_remove(name);
            base.attributes.insert(name.clone(), value.clone());
        }
        for (name, child) in &own.children {
            let child_at = format!("{at}:{name}");
            base.attributes.shift_remove(name);
            let merged = match (&child.extends, base.children.get(name)) {
                (None, Some(inherited)) => self.overlay(inherited.clone(), child, chain, &child_at)?,
                _ => self.flatten(child, chain, &child_at)?,
            };
            base.children.insert(name.clone(), merged);
        }
        Ok(base)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse_file, print, Value};
    use super::*;

    fn scope(src: &str) -> IndexMap<String, ComponentDescription> {
        parse_file(src).unwrap().into_iter().map(|c| (c.name.clone(), c)).collect()
    }

    fn flat(src: &str) -> Result<ComponentDescription, DescriptorError> {
        let s = scope(src);
        resolve_extends(&s["sfConfig"], &s)
    }

    #[test]
    fn override_keeps_position_and_additions_append() {
        let n = flat("P { a 1; b 2; } sfConfig extends P { b 3; c 4; }").unwrap();
        assert_eq!(n.attributes.keys().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(n.attr("b"), Some(&Value::Int(3)));
        assert!(n.is_flat());
    }

    #[test]
    fn bare_extends_is_a_copy() {
        let n = flat("P { a 1; k { z 0; } } sfConfig extends P;").unwrap();
        let s = scope("P { a 1; k { z 0; } }");
        let mut expected = s["P"].clone();
        expected.name = "sfConfig".into();
        assert_eq!(n, expected);
    }

    #[test]
    fn children_merge_unless_they_name_a_prototype() {
        let n = flat("Q { q 1; } P { k { x 1; y 2; } } sfConfig extends P { k { y 9; } }").unwrap();
        assert_eq!(print(&n.children["k"]), "k {\n  x 1;\n  y 9;\n}\n");
        let n = flat("Q { q 1; } P { k { x 1; y 2; } } sfConfig extends P { k extends Q; }").unwrap();
        assert_eq!(print(&n.children["k"]), "k {\n  q 1;\n}\n");
    }

    #[test]
    fn cycles_and_unknowns() {
        let e = flat("A extends B {} B extends A {} sfConfig extends A;").unwrap_err();
        assert_eq!(e, DescriptorError::ExtendsCycle { cycle: vec!["A".into(), "B".into(), "A".into()] });
        let e = flat("sfConfig { w extends Nope; }").unwrap_err();
        assert_eq!(e, DescriptorError::UnknownPrototype { node: "sfConfig:w".into(), prototype: "Nope".into() });
    }

    #[test]
    fn idempotent_on_flat_trees() {
        let once = flat("P { a 1; k extends R; } R { r 1; } sfConfig extends P { b 2; }").unwrap();
        let twice = resolve_extends(&once, &IndexMap::new()).unwrap();
        assert_eq!(once, twice);
    }
}
