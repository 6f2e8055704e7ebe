use super::{DescriptorError, Pos};

#[derive(Clone, Debug, PartialEq)]
pub(super) enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    Real(f64),
    LBrace,
    RBrace,
    Semi,
    Colon,
    Eof,
}

impl Tok {
    pub(super) fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Real(r) => format!("number {r}"),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

pub(super) fn tokenize(text: &str) -> Result<Vec<(Tok, Pos)>, DescriptorError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |pos: Pos, message: String| DescriptorError::Syntax { pos, message };

    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let single = match c {
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            ';' => Some(Tok::Semi),
            ':' => Some(Tok::Colon),
            _ => None,
        };
        if let Some(tok) = single {
            out.push((tok, pos));
            i += 1;
            col += 1;
            continue;
        }
        if c == '"' {
            let mut s = String::new();
            i += 1;
            col += 1;
            loop {
                let Some(&d) = chars.get(i) else {
                    return Err(err(pos, "unterminated string".into()));
                };
                i += 1;
                col += 1;
                match d {
                    '"' => break,
                    '\n' => return Err(err(pos, "newline in string".into())),
                    '\\' => {
                        let e = chars.get(i).copied();
                        i += 1;
                        col += 1;
                        s.push(match e {
                            Some('"') => '"',
                            Some('\\') => '\\',
                            Some('n') => '\n',
                            Some('t') => '\t',
                            other => {
                                return Err(err(Pos { line, col: col - 2 }, format!("bad escape `\\{}`", other.unwrap_or(' '))));
                            }
                        });
                    }
                    d => s.push(d),
                }
            }
            out.push((Tok::Str(s), pos));
            continue;
        }
        let starts_number = c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(char::is_ascii_digit));
        if starts_number {
            let start = i;
            i += 1;
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            let tok = if text.contains(['.', 'e', 'E']) {
                text.parse::<f64>().ok().filter(|v| v.is_finite()).map(Tok::Real)
            } else {
                text.parse::<i64>().ok().map(Tok::Int)
            };
            out.push((tok.ok_or_else(|| err(pos, format!("malformed number `{text}`")))?, pos));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '-') {
                i += 1;
            }
            col += i - start;
            out.push((Tok::Ident(chars[start..i].iter().collect()), pos));
            continue;
        }
        return Err(err(pos, format!("unexpected character `{c}`")));
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Tok> {
        tokenize(s).unwrap().into_iter().map(|(t, _)| t).collect()
    }

    #[test]
    fn numbers_strings_and_comments() {
        assert_eq!(
            toks("a -3 2.5 1e3 \"x\\\"y\" // gone\n;"),
            vec![
                Tok::Ident("a".into()),
                Tok::Int(-3),
                Tok::Real(2.5),
                Tok::Real(1000.0),
                Tok::Str("x\"y".into()),
                Tok::Semi,
                Tok::Eof
            ]
        );
    }

    #[test]
    fn positions_are_one_based() {
        let t = tokenize("a\n  b").unwrap();
        assert_eq!(t[1].1, Pos { line: 2, col: 3 });
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(tokenize("a @"), Err(DescriptorError::Syntax { pos: Pos { line: 1, col: 3 }, .. })));
        assert!(tokenize("\"open").is_err());
        assert!(tokenize("1.2.3").is_err());
    }
}
