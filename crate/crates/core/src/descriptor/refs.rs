use super::{path_string, ComponentDescription, DescriptorError, RefKind, Reference, Value};

/// What a reference points at.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Value(Value),
    Component(ComponentDescription),
}

/// Replaces every eager reference by what it names. A reference to a
/// component becomes a child holding a resolved copy of that component.
/// Lazy references are left in place.
pub fn resolve_references(tree: &ComponentDescription) -> Result<ComponentDescription, DescriptorError> {
    let mut r = Resolver { root: tree, attrs: Vec::new(), subtrees: Vec::new() };
    r.subtree(&[])
}

/// Resolves one reference as seen from attribute `attr` of the node at
/// `path`. Used at deployment time for lazy references, against the live tree.
pub fn resolve_reference(
    root: &ComponentDescription,
    path: &[String],
    attr: &str,
    reference: &Reference,
) -> Result<Target, DescriptorError> {
    let mut r = Resolver { root, attrs: Vec::new(), subtrees: Vec::new() };
    r.follow(path, Some(attr), reference)
}

struct Resolver<'a> {
    root: &'a ComponentDescription,
    /// Attributes whose references are being followed.
    attrs: Vec<(Vec<String>, String)>,
    /// Components being copied.
    subtrees: Vec<Vec<String>>,
}

impl Resolver<'_> {
    fn node(&self, path: &[String]) -> &ComponentDescription {
        self.root.at(path).expect("resolver only visits existing paths")
    }

    fn subtree(&mut self, path: &[String]) -> Result<ComponentDescription, DescriptorError> {
        if let Some(p) = self.subtrees.iter().find(|p| p.starts_with(path)) {
            return Err(DescriptorError::ReferenceCycle { at: path_string(p), reference: path_string(path) });
        }
        self.subtrees.push(path.to_vec());
        let result = self.copy_resolved(path);
        self.subtrees.pop();
        result
    }

    fn copy_resolved(&mut self, path: &[String]) -> Result<ComponentDescription, DescriptorError> {
        let node = self.node(path).clone();
        let mut out = ComponentDescription { name: node.name.clone(), extends: node.extends.clone(), pos: node.pos, ..Default::default() };
        let mut linked = Vec::new();
        for (name, value) in &node.attributes {
            match value {
                Value::Ref(r) if !r.lazy => match self.attribute(path, name)? {
                    Target::Value(v) => {
                        out.attributes.insert(name.clone(), v);
                    }
                    Target::Component(mut c) => {
                        c.name = name.clone();
                        linked.push(c);
                    }
                },
                v => {
                    out.attributes.insert(name.clone(), v.clone());
                }
            }
        }
        for name in node.children.keys() {
            let mut child_path = path.to_vec();
            child_path.push(name.clone());
            let child = self.subtree(&child_path)?;
            out.children.insert(name.clone(), child);
        }
        for c in linked {
            out.children.insert(c.name.clone(), c);
        }
        Ok(out)
    }

    /// The resolved value of attribute `name` on the node at `path`.
    fn attribute(&mut self, path: &[String], name: &str) -> Result<Target, DescriptorError> {
        let value = self.node(path).attributes[name].clone();
        let Value::Ref(r) = value else { return Ok(Target::Value(value)) };
        let key = (path.to_vec(), name.to_string());
        if self.attrs.contains(&key) {
            return Err(DescriptorError::ReferenceCycle { at: format!("{}:{name}", path_string(path)), reference: r.to_string() });
        }
        self.attrs.push(key);
        let result = self.follow(path, Some(name), &r);
        self.attrs.pop();
        result
    }

    fn follow(&mut self, path: &[String], from_attr: Option<&str>, r: &Reference) -> Result<Target, DescriptorError> {
        let at = match from_attr {
            Some(a) => format!("{}:{a}", path_string(path)),
            None => path_string(path),
        };
        let unresolvable = || DescriptorError::Unresolvable { at: at.clone(), reference: r.to_string() };
        let (anchor, walk): (Vec<String>, &[String]) = match r.kind {
            RefKind::Attrib => {
                let name = &r.segments[0];
                let mut scope = path.to_vec();
                loop {
                    let node = self.node(&scope);
                    let is_self = scope.as_slice() == path && from_attr == Some(name.as_str());
                    if (node.attributes.contains_key(name) && !is_self) || node.children.contains_key(name) {
                        break (scope, &r.segments[..]);
                    }
                    if scope.pop().is_none() {
                        return Err(unresolvable());
                    }
                }
            }
            RefKind::Path => (Vec::new(), &r.segments[1..]),
            RefKind::ParentChain => {
                let ups = r.segments.iter().take_while(|s| *s == "PARENT").count();
                if ups > path.len() {
                    return Err(unresolvable());
                }
                (path[..path.len() - ups].to_vec(), &r.segments[ups..])
            }
        };
        let Some((last, down)) = walk.split_last() else {
            return self.subtree(&anchor).map(Target::Component);
        };
        let mut node_path = anchor;
        for seg in down {
            if !self.node(&node_path).children.contains_key(seg) {
                return Err(unresolvable());
            }
            node_path.push(seg.clone());
        }
        let node = self.node(&node_path);
        if node.attributes.contains_key(last) {
            if node.attributes[last].is_lazy() {
                return Err(DescriptorError::ReachesLazy { at, reference: r.to_string() });
            }
            return self.attribute(&node_path, last);
        }
        if node.children.contains_key(last) {
            node_path.push(last.clone());
            return self.subtree(&node_path).map(Target::Component);
        }
        Err(unresolvable())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse, print};
    use super::*;

    fn resolved(src: &str) -> Result<ComponentDescription, DescriptorError> {
        resolve_references(&parse(src).unwrap())
    }

    #[test]
    fn attrib_searches_up_the_tree() {
        let t = resolved("sfConfig { port 80; web { inner { p REF ATTRIB port; } } }").unwrap();
        assert_eq!(t.children["web"].children["inner"].attr("p"), Some(&Value::Int(80)));
        // The nearest definition wins.
        let t = resolved("sfConfig { port 80; web { port 81; p REF ATTRIB port; } }").unwrap();
        assert_eq!(t.children["web"].attr("p"), Some(&Value::Int(81)));
        // An attribute does not find itself.
        let t = resolved("sfConfig { port 80; web { port REF ATTRIB port; } }").unwrap();
        assert_eq!(t.children["web"].attr("port"), Some(&Value::Int(80)));
    }

    #[test]
    fn paths_and_parents() {
        let t = resolved("sfConfig { q sfConfig:web:port; web { port 80; up PARENT:q; } }").unwrap();
        assert_eq!(t.attr("q"), Some(&Value::Int(80)));
        assert_eq!(t.children["web"].attr("up"), Some(&Value::Int(80)));
        let t = resolved("sfConfig { a 1; x { y { z PARENT:PARENT:a; } } }").unwrap();
        assert_eq!(t.children["x"].children["y"].attr("z"), Some(&Value::Int(1)));
    }

    #[test]
    fn component_references_become_children() {
        let t = resolved("sfConfig { db { port 5432; } app { store REF sfConfig:db; } }").unwrap();
        assert_eq!(print(&t.children["app"]), "app {\n  store {\n    port 5432;\n  }\n}\n");
    }

    #[test]
    fn failures() {
        assert!(matches!(resolved("sfConfig { a ATTRIB nowhere; }"), Err(DescriptorError::Unresolvable { .. })));
        assert!(matches!(resolved("sfConfig { a sfConfig:b; b sfConfig:a; }"), Err(DescriptorError::ReferenceCycle { .. })));
        assert!(matches!(resolved("sfConfig { k { me REF PARENT; } }"), Err(DescriptorError::ReferenceCycle { .. })));
        assert!(matches!(resolved("sfConfig { a PARENT:x; }"), Err(DescriptorError::Unresolvable { .. })));
        assert!(matches!(resolved("sfConfig { l LAZY ATTRIB host; e ATTRIB l; }"), Err(DescriptorError::ReachesLazy { .. })));
    }

    #[test]
    fn lazy_survives_and_resolves_later() {
        let t = resolved("sfConfig { b { host LAZY ATTRIB h; } }").unwrap();
        let Some(Value::Ref(r)) = t.children["b"].attr("host").cloned() else { panic!() };
        assert!(r.lazy);
        let mut live = t.clone();
        live.attributes.insert("h".into(), Value::Str("n1".into()));
        let got = resolve_reference(&live, &["b".into()], "host", &r).unwrap();
        assert_eq!(got, Target::Value(Value::Str("n1".into())));
    }
}
