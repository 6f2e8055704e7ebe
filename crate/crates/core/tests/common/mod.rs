//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use agora::descriptor::{self, ComponentDescription, Value};

pub mod props;

pub fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn bundled_scenarios() -> Vec<PathBuf> {
    files_with(&workspace().join("scenarios"), "scn")
}

pub fn corpus_dir() -> PathBuf {
    workspace().join("descriptors/corpus")
}

fn files_with(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    out
}

/// Files named on `// include: path` lines, relative to the descriptor.
fn includes(path: &Path, text: &str) -> Vec<Vec<ComponentDescription>> {
    text.lines()
        .filter_map(|l| l.trim().strip_prefix("// include:"))
        .map(|rel| descriptor::load_file(&path.parent().unwrap().join(rel.trim())).unwrap())
        .collect()
}

/// A deliberately plain flattener: prototypes live in an association list,
/// later entries shadow earlier ones, and merging is done entry by entry on
/// vectors. It shares nothing with the library's flattener but the parser.
pub mod oracle {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    pub struct Node {
        pub name: String,
        pub attrs: Vec<(String, Value)>,
        pub kids: Vec<(String, Node)>,
    }

    fn raw(c: &ComponentDescription) -> (Option<String>, Node, Vec<(String, ComponentDescription)>) {
        let node = Node {
            name: c.name.clone(),
            attrs: c.attributes.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            kids: Vec::new(),
        };
        let kids = c.children.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        (c.extends.clone(), node, kids)
    }

    fn lookup<'a>(protos: &'a [(String, ComponentDescription)], name: &str) -> Option<&'a ComponentDescription> {
        protos.iter().rev().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn flatten(c: &ComponentDescription, protos: &[(String, ComponentDescription)], depth: usize) -> Node {
        assert!(depth < 64, "prototype chain too deep");
        let (extends, own, own_kids) = raw(c);
        let mut base = match extends {
            Some(p) => {
                let mut b = flatten(lookup(protos, &p).expect("known prototype"), protos, depth + 1);
                b.name = own.name.clone();
                b
            }
            None => Node { name: own.name.clone(), attrs: vec![], kids: vec![] },
        };
        merge(&mut base, own.attrs, own_kids, protos, depth);
        base
    }

    fn merge(
        base: &mut Node,
        attrs: Vec<(String, Value)>,
        kids: Vec<(String, ComponentDescription)>,
        protos: &[(String, ComponentDescription)],
        depth: usize,
    ) {
        for (k, v) in attrs {
            base.kids.retain(|(n, _)| *n != k);
            match base.attrs.iter_mut().find(|(n, _)| *n == k) {
                Some(slot) => slot.1 = v,
                None => base.attrs.push((k, v)),
            }
        }
        for (k, child) in kids {
            base.attrs.retain(|(n, _)| *n != k);
            let existing = base.kids.iter().position(|(n, _)| *n == k);
            let merged = match (existing, &child.extends) {
                (Some(i), None) => {
                    let mut inherited = base.kids[i].1.clone();
                    let (_, own, own_kids) = raw(&child);
                    merge(&mut inherited, own.attrs, own_kids, protos, depth);
                    inherited
                }
                _ => flatten(&child, protos, depth + 1),
            };
            match existing {
                Some(i) => base.kids[i].1 = merged,
                None => base.kids.push((k, merged)),
            }
        }
    }

    pub fn from_tree(c: &ComponentDescription) -> Node {
        Node {
            name: c.name.clone(),
            attrs: c.attributes.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            kids: c.children.iter().map(|(k, v)| (k.clone(), from_tree(v))).collect(),
        }
    }

    /// Prototype list in shadowing order: built-ins, includes, then the file.
    pub fn scope(file: &[ComponentDescription], includes: &[Vec<ComponentDescription>]) -> Vec<(String, ComponentDescription)> {
        descriptor::parse_file(descriptor::PRELUDE)
            .unwrap()
            .into_iter()
            .chain(includes.iter().flatten().cloned())
            .chain(file.iter().filter(|c| c.name != descriptor::ROOT_NAME).cloned())
            .map(|c| (c.name.clone(), c))
            .collect()
    }
}

#[derive(Default, Debug)]
pub struct CorpusOutcome {
    pub files: usize,
    pub round_trips: usize,
    pub resolved: usize,
    pub oracle_checked: usize,
    pub errors_checked: usize,
    pub failures: Vec<String>,
}

/// Runs every corpus file through parse, print, flatten and resolve, and
/// compares with the hand-written `.expected` or `.error` next to it.
pub fn check_corpus() -> CorpusOutcome {
    let mut out = CorpusOutcome::default();
    for path in files_with(&corpus_dir(), "sd") {
        out.files += 1;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).unwrap();
        let includes = includes(&path, &text);
        let error_file = path.with_extension("error");
        if error_file.exists() {
            let want = std::fs::read_to_string(&error_file).unwrap();
            let got = descriptor::parse_file(&text).and_then(|f| descriptor::resolve_components(&f, &includes));
            match got {
                Err(e) if e.to_string() == want.trim_end() => out.errors_checked += 1,
                Err(e) => out.failures.push(format!("{name}: error `{e}`, wanted `{}`", want.trim_end())),
                Ok(_) => out.failures.push(format!("{name}: resolved, wanted `{}`", want.trim_end())),
            }
            continue;
        }
        let file = match descriptor::parse_file(&text) {
            Ok(f) => f,
            Err(e) => {
                out.failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        match descriptor::parse_file(&descriptor::print_file(&file)) {
            Ok(again) if again == file => out.round_trips += 1,
            _ => out.failures.push(format!("{name}: print does not read back as the same tree")),
        }

        let root = file.iter().find(|c| c.name == descriptor::ROOT_NAME).unwrap();
        let scope = descriptor::prototype_scope(&file, &includes).unwrap();
        let flat = descriptor::resolve_extends(root, &scope).unwrap();
        let naive = oracle::flatten(root, &oracle::scope(&file, &includes), 0);
        if oracle::from_tree(&flat) == naive {
            out.oracle_checked += 1;
        } else {
            out.failures.push(format!("{name}: flattening differs from the oracle\n{flat:#?}\n{naive:#?}"));
        }
        if descriptor::resolve_extends(&flat, &Default::default()).ok().as_ref() != Some(&flat) {
            out.failures.push(format!("{name}: flattening a flat tree changed it"));
        }

        let want = std::fs::read_to_string(path.with_extension("expected")).unwrap_or_default();
        match descriptor::resolve_components(&file, &includes) {
            Ok(t) => {
                let printed = descriptor::print(&t);
                if printed == want && descriptor::parse(&want).ok().as_ref() == Some(&t) {
                    out.resolved += 1;
                } else {
                    out.failures.push(format!("{name}: resolved to\n{printed}wanted\n{want}"));
                }
            }
            Err(e) => out.failures.push(format!("{name}: {e}")),
        }
    }
    out
}
