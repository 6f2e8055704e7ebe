use super::lexer::{tokenize, Tok};
use super::{ComponentDescription, DescriptorError, Pos, RefKind, Reference, Value, ROOT_NAME};

/// Parses a whole file into its top-level components.
pub fn parse_file(text: &str) -> Result<Vec<ComponentDescription>, DescriptorError> {
    let mut p = Parser { toks: tokenize(text)?, at: 0 };
    let mut out: Vec<ComponentDescription> = Vec::new();
    while p.peek() != &Tok::Eof {
        let (name, pos) = p.ident("component name")?;
        if out.iter().any(|c| c.name == name) {
            return Err(DescriptorError::Duplicate { pos, name });
        }
        out.push(p.component(name, pos)?);
    }
    Ok(out)
}

/// Parses a file and returns its `sfConfig` component, unresolved.
pub fn parse(text: &str) -> Result<ComponentDescription, DescriptorError> {
    parse_file(text)?.into_iter().find(|c| c.name == ROOT_NAME).ok_or(DescriptorError::MissingRoot)
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.at + n).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, DescriptorError> {
        Err(DescriptorError::Syntax { pos: self.pos(), message: format!("expected {expected}, found {}", self.peek().describe()) })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), DescriptorError> {
        if self.peek() == &tok {
            self.bump();
            Ok(())
        } else {
            self.fail(what)
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), DescriptorError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let pos = self.pos();
                self.bump();
                Ok((s, pos))
            }
            _ => self.fail(what),
        }
    }

    fn is_keyword(&self, n: usize, kw: &str) -> bool {
        matches!(self.peek_at(n), Tok::Ident(s) if s == kw)
    }

    /// After the name: `[extends P] ( { entries } [;] | ; )`.
    fn component(&mut self, name: String, pos: Pos) -> Result<ComponentDescription, DescriptorError> {
        let mut node = ComponentDescription { name, pos, ..Default::default() };
        if self.is_keyword(0, "extends") {
            self.bump();
            node.extends = Some(self.ident("prototype name")?.0);
        }
        match self.peek() {
            Tok::Semi if node.extends.is_some() => {
                self.bump();
                return Ok(node);
            }
            Tok::LBrace => {
                self.bump();
            }
            _ => return self.fail("`{`"),
        }
        while self.peek() != &Tok::RBrace {
            if self.peek() == &Tok::Eof {
                return self.fail("`}`");
            }
            let (name, pos) = self.ident("attribute or component name")?;
            if node.attributes.contains_key(&name) || node.children.contains_key(&name) {
                return Err(DescriptorError::Duplicate { pos, name });
            }
            if self.is_keyword(0, "extends") || self.peek() == &Tok::LBrace {
                let child = self.component(name.clone(), pos)?;
                node.children.insert(name, child);
            } else {
                let value = self.value()?;
                self.expect(Tok::Semi, "`;`")?;
                node.attributes.insert(name, value);
            }
        }
        self.bump();
        if self.peek() == &Tok::Semi {
            self.bump();
        }
        Ok(node)
    }

    fn value(&mut self) -> Result<Value, DescriptorError> {
        let v = match self.peek().clone() {
            Tok::Str(s) => Value::Str(s),
            Tok::Int(i) => Value::Int(i),
            Tok::Real(r) => Value::Real(r),
            Tok::Ident(s) if s == "true" => Value::Bool(true),
            Tok::Ident(s) if s == "false" => Value::Bool(false),
            Tok::Ident(_) => return self.reference().map(Value::Ref),
            _ => return self.fail("a value"),
        };
        self.bump();
        Ok(v)
    }

    /// `[REF] [LAZY] (ATTRIB name | sfConfig(:seg)* | PARENT(:PARENT)*(:seg)*)`
    fn reference(&mut self) -> Result<Reference, DescriptorError> {
        if self.is_keyword(0, "REF") {
            self.bump();
        }
        let lazy = self.is_keyword(0, "LAZY");
        if lazy {
            self.bump();
        }
        if self.is_keyword(0, "ATTRIB") {
            self.bump();
            let (name, _) = self.ident("attribute name after ATTRIB")?;
            return Ok(Reference { kind: RefKind::Attrib, segments: vec![name], lazy });
        }
        let (first, pos) = self.ident("a value or reference")?;
        let kind = match first.as_str() {
            ROOT_NAME => RefKind::Path,
            "PARENT" => RefKind::ParentChain,
            _ => {
                return Err(DescriptorError::Syntax {
                    pos,
                    message: format!("expected a value or reference, found `{first}` (references start with ATTRIB, sfConfig or PARENT)"),
                })
            }
        };
        let mut segments = vec![first];
        let mut climbing = kind == RefKind::ParentChain;
        while self.peek() == &Tok::Colon {
            self.bump();
            let (seg, pos) = self.ident("path segment")?;
            if seg == "PARENT" && !climbing {
                return Err(DescriptorError::Syntax { pos, message: "PARENT may only lead a reference".into() });
            }
            climbing &= seg == "PARENT";
            segments.push(seg);
        }
        Ok(Reference { kind, segments, lazy })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_with_extends_and_attribute() {
        let root = parse("sfConfig extends Compound { x 1; }").unwrap();
        assert_eq!(root.extends.as_deref(), Some("Compound"));
        assert_eq!(root.attr("x"), Some(&Value::Int(1)));
    }

    #[test]
    fn duplicate_attribute_points_at_the_second() {
        let e = parse("sfConfig {\n  x 1;\n  x 2;\n}").unwrap_err();
        assert_eq!(e, DescriptorError::Duplicate { pos: Pos { line: 3, col: 3 }, name: "x".into() });
        assert!(matches!(parse("sfConfig { x 1; x { } }"), Err(DescriptorError::Duplicate { .. })));
    }

    #[test]
    fn nested_child() {
        let root = parse("sfConfig { web { port 80; } }").unwrap();
        assert_eq!(root.children["web"].attr("port"), Some(&Value::Int(80)));
    }

    #[test]
    fn references() {
        let root = parse("sfConfig { a REF ATTRIB port; b sfConfig:web:port; c REF LAZY PARENT:PARENT:x; d LAZY ATTRIB y; }").unwrap();
        assert_eq!(root.attr("a"), Some(&Value::Ref(Reference { kind: RefKind::Attrib, segments: vec!["port".into()], lazy: false })));
        let Some(Value::Ref(b)) = root.attr("b") else { panic!() };
        assert_eq!((b.kind, b.segments.len(), b.lazy), (RefKind::Path, 3, false));
        let Some(Value::Ref(c)) = root.attr("c") else { panic!() };
        assert_eq!((c.kind, c.lazy), (RefKind::ParentChain, true));
        assert!(root.attr("d").unwrap().is_lazy());
    }

    #[test]
    fn short_forms() {
        let file = parse_file("A { x true; }; sfConfig { db extends A; w extends A { y \"s\"; } }").unwrap();
        assert_eq!(file.len(), 2);
        let root = &file[1];
        assert_eq!(root.children["db"].extends.as_deref(), Some("A"));
        assert_eq!(root.children["w"].attr("y"), Some(&Value::Str("s".into())));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let e = parse("sfConfig {\n  x ;\n}").unwrap_err();
        assert!(matches!(e, DescriptorError::Syntax { pos: Pos { line: 2, col: 5 }, .. }), "{e}");
        assert!(parse("sfConfig { x foo; }").is_err());
        assert!(parse("sfConfig { x 1 }").is_err());
        assert!(parse("sfConfig { x sfConfig:PARENT; }").is_err());
        assert_eq!(parse("Other { }"), Err(DescriptorError::MissingRoot));
    }
}
