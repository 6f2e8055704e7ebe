//! The deployment description language.
//!
//! ```text
//! Base { sfClass "Compound"; ping 2; }
//! sfConfig extends Base {
//!     port 8080;
//!     web { listen REF ATTRIB port; peer REF LAZY sfConfig:db:host; }
//!     db extends StorageBackend;
//! }
//! ```
//!
//! A file is a list of top-level components. The one named `sfConfig` is the
//! root of the deployment; the others serve as prototypes for `extends`.
//! Resolution flattens `extends` first and only then resolves references.

mod flatten;
mod lexer;
mod parser;
mod print;
mod refs;

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

pub use flatten::resolve_extends;
pub use parser::{parse, parse_file};
pub use print::{print, print_file};
pub use refs::{resolve_reference, resolve_references, Target};

pub const ROOT_NAME: &str = "sfConfig";
pub const CLASS_ATTR: &str = "sfClass";

/// The built-in component prototypes.
pub const PRELUDE: &str = include_str!("components.sd");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("{pos}: syntax error: {message}")]
    Syntax { pos: Pos, message: String },
    #[error("{pos}: duplicate name `{name}`")]
    Duplicate { pos: Pos, name: String },
    #[error("no `sfConfig` component")]
    MissingRoot,
    #[error("{node}: unknown prototype `{prototype}`")]
    UnknownPrototype { node: String, prototype: String },
    #[error("extends cycle: {}", .cycle.join(" -> "))]
    ExtendsCycle { cycle: Vec<String> },
    #[error("{at}: cannot resolve `{reference}`")]
    Unresolvable { at: String, reference: String },
    #[error("{at}: reference cycle through `{reference}`")]
    ReferenceCycle { at: String, reference: String },
    #[error("{at}: `{reference}` leads to a lazy value, which is only known at deployment")]
    ReachesLazy { at: String, reference: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefKind {
    /// `ATTRIB name`: nearest enclosing definition.
    Attrib,
    /// `sfConfig:a:b`: walk down from the root.
    Path,
    /// `PARENT:PARENT:a`: climb, then walk down.
    ParentChain,
}

/// A symbolic link to another attribute or component. `segments` holds the
/// reference exactly as written, e.g. `["PARENT", "db", "port"]`; for
/// `ATTRIB` it holds the single name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reference {
    pub kind: RefKind,
    pub segments: Vec<String>,
    pub lazy: bool,
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lazy {
            f.write_str("LAZY ")?;
        }
        match self.kind {
            RefKind::Attrib => write!(f, "ATTRIB {}", self.segments.join(":")),
            RefKind::Path | RefKind::ParentChain => f.write_str(&self.segments.join(":")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Real(f64),
    Bool(bool),
    Ref(Reference),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Integers and reals as `f64`.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn is_lazy(&self) -> bool {
        matches!(self, Value::Ref(r) if r.lazy)
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Str(s) => serde_json::json!(s),
            Value::Int(i) => serde_json::json!(i),
            Value::Real(r) => serde_json::json!(r),
            Value::Bool(b) => serde_json::json!(b),
            Value::Ref(r) => serde_json::json!(r.to_string()),
        }
    }
}

/// A node of the description tree. Equality ignores source positions but
/// respects attribute and child order.
#[derive(Clone, Debug, Default)]
pub struct ComponentDescription {
    pub name: String,
    pub extends: Option<String>,
    pub attributes: IndexMap<String, Value>,
    pub children: IndexMap<String, ComponentDescription>,
    pub pos: Pos,
}

impl PartialEq for ComponentDescription {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.extends == other.extends
            && self.attributes.iter().eq(other.attributes.iter())
            && self.children.iter().eq(other.children.iter())
    }
}

impl ComponentDescription {
    pub fn new(name: impl Into<String>) -> Self {
        ComponentDescription { name: name.into(), ..Default::default() }
    }

    pub fn with_attr(mut self, name: &str, value: Value) -> Self {
        self.attributes.insert(name.to_string(), value);
        self
    }

    pub fn with_child(mut self, child: ComponentDescription) -> Self {
        self.children.insert(child.name.clone(), child);
        self
    }

    pub fn attr(&self, name: &str) -> Option<&Value> {
        self.attributes.get(name)
    }

    pub fn class(&self) -> Option<&str> {
        self.attr(CLASS_ATTR).and_then(Value::as_str)
    }

    /// The node at `path` (child names below this one).
    pub fn at(&self, path: &[String]) -> Option<&ComponentDescription> {
        path.iter().try_fold(self, |node, name| node.children.get(name))
    }

    pub fn at_mut(&mut self, path: &[String]) -> Option<&mut ComponentDescription> {
        path.iter().try_fold(self, |node, name| node.children.get_mut(name))
    }

    /// True if no node in the tree still names a prototype.
    pub fn is_flat(&self) -> bool {
        self.extends.is_none() && self.children.values().all(ComponentDescription::is_flat)
    }

    /// Every node path in pre-order, the root being the empty path.
    pub fn paths(&self) -> Vec<Vec<String>> {
        fn walk(node: &ComponentDescription, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
            out.push(prefix.clone());
            for (name, child) in &node.children {
                prefix.push(name.clone());
                walk(child, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        walk(self, &mut Vec::new(), &mut out);
        out
    }
}

/// Renders a node path as `sfConfig:a:b`.
pub fn path_string(path: &[String]) -> String {
    std::iter::once(ROOT_NAME).chain(path.iter().map(String::as_str)).collect::<Vec<_>>().join(":")
}

/// Prototypes visible to a file: the prelude, then included files, then the
/// file's own top-level components; later definitions win.
pub fn prototype_scope(
    file: &[ComponentDescription],
    includes: &[Vec<ComponentDescription>],
) -> Result<IndexMap<String, ComponentDescription>, DescriptorError> {
    let mut scope = IndexMap::new();
    for c in parse_file(PRELUDE)? {
        scope.insert(c.name.clone(), c);
    }
    for c in includes.iter().flatten().chain(file.iter()) {
        if c.name != ROOT_NAME {
            scope.insert(c.name.clone(), c.clone());
        }
    }
    Ok(scope)
}

/// Parse, flatten, and resolve a descriptor source into its `sfConfig` tree.
pub fn resolve_source(text: &str, includes: &[Vec<ComponentDescription>]) -> Result<ComponentDescription, DescriptorError> {
    let file = parse_file(text)?;
    resolve_components(&file, includes)
}

pub fn resolve_components(
    file: &[ComponentDescription],
    includes: &[Vec<ComponentDescription>],
) -> Result<ComponentDescription, DescriptorError> {
    let root = file.iter().find(|c| c.name == ROOT_NAME).ok_or(DescriptorError::MissingRoot)?;
    let scope = prototype_scope(file, includes)?;
    let flat = resolve_extends(root, &scope)?;
    resolve_references(&flat)
}

/// Reads and parses a descriptor file.
pub fn load_file(path: &Path) -> Result<Vec<ComponentDescription>, DescriptorError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DescriptorError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_file(&text)
}

/// Problems that do not stop resolution but probably indicate a mistake.
pub fn lint(root: &ComponentDescription) -> Vec<String> {
    const KNOWN: [&str; 4] = ["Compound", "StorageBackend", "Domain", "MarketDomain"];
    let mut out = Vec::new();
    for path in root.paths() {
        let node = root.at(&path).expect("path from paths()");
        let at = path_string(&path);
        match node.attr(CLASS_ATTR) {
            None => out.push(format!("{at}: no sfClass; the node will be deployed as a Compound")),
            Some(Value::Str(c)) if !KNOWN.contains(&c.as_str()) => out.push(format!("{at}: unknown sfClass `{c}`")),
            Some(Value::Str(_)) => {}
            Some(other) => out.push(format!("{at}: sfClass must be a string, found {}", print::value_text(other))),
        }
    }
    out
}
