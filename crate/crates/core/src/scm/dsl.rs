use super::SelectionDiagram;
use crate::error::{Error, Result};

#[derive(Debug, PartialEq)]
enum Token {
    Name(String),
    Directed,
    Bidirected,
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<Token>> {
    let bad = || Error::Parse {
        line: lineno,
        text: line.trim().to_string(),
    };
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() || c == ',' || c == ';' {
            chars.next();
        } else if c == '-' {
            chars.next();
            if chars.next() != Some('>') {
                return Err(bad());
            }
            out.push(Token::Directed);
        } else if c == '<' {
            chars.next();
            if chars.next() != Some('-') || chars.next() != Some('>') {
                return Err(bad());
            }
            out.push(Token::Bidirected);
        } else if c.is_alphanumeric() || c == '_' || c == '.' {
            let mut name = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_alphanumeric() || c == '_' || c == '.' {
                    name.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(Token::Name(name));
        } else {
            return Err(bad());
        }
    }
    Ok(out)
}

const KEYWORDS: [&str; 5] = ["latent", "selection", "treatment", "outcome", "node"];

/// Parses the graph DSL.
///
/// Each line holds edges (`A -> B`, chains `A -> B -> C`, several edges per
/// line, `A <-> B` for a hidden common cause) or an annotation:
/// `latent U`, `selection S`, `treatment A`, `outcome Y`, `node N`.
/// `#` starts a comment.
pub fn parse_graph_dsl(text: &str) -> Result<SelectionDiagram> {
    let mut g = SelectionDiagram::new();
    let mut annotations: Vec<(usize, String, Vec<String>)> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = raw.split('#').next().unwrap_or("");
        let tokens = tokenize(line, lineno)?;
        if tokens.is_empty() {
            continue;
        }
        let bad = || Error::Parse {
            line: lineno,
            text: line.trim().to_string(),
        };
        if let Token::Name(first) = &tokens[0] {
            if KEYWORDS.contains(&first.as_str())
                && tokens.iter().all(|t| matches!(t, Token::Name(_)))
            {
                let names: Vec<String> = tokens[1..]
                    .iter()
                    .map(|t| match t {
                        Token::Name(n) => n.clone(),
                        _ => unreachable!(),
                    })
                    .collect();
                if names.is_empty() {
                    return Err(bad());
                }
                if first == "node" {
                    for n in &names {
                        g.add_node(n);
                    }
                } else {
                    annotations.push((lineno, first.clone(), names));
                }
                continue;
            }
        }
        let mut i = 0;
        while i < tokens.len() {
            let Token::Name(from) = &tokens[i] else {
                return Err(bad());
            };
            let (Some(arrow), Some(Token::Name(to))) = (tokens.get(i + 1), tokens.get(i + 2))
            else {
                return Err(bad());
            };
            g.add_node(from);
            g.add_node(to);
            match arrow {
                Token::Directed => g.add_edge(from, to)?,
                Token::Bidirected => {
                    let mut name = format!("U_{from}_{to}");
                    while g.index.contains_key(&name) {
                        name.push('\'');
                    }
                    let u = g.add_node(&name);
                    g.latent[u] = true;
                    g.add_edge(&name, from)?;
                    g.add_edge(&name, to)?;
                }
                Token::Name(_) => return Err(bad()),
            }
            // A chain continues from `to`; otherwise start a new edge.
            i += if matches!(tokens.get(i + 3), Some(Token::Directed | Token::Bidirected)) {
                2
            } else {
                3
            };
        }
    }
    g.check_acyclic()?;

    for (lineno, kind, names) in annotations {
        let single = || -> Result<&str> {
            match names.as_slice() {
                [n] => Ok(n),
                _ => Err(Error::Parse {
                    line: lineno,
                    text: format!("{kind} expects one node"),
                }),
            }
        };
        match kind.as_str() {
            "latent" => {
                for n in &names {
                    g.set_latent(n, true)?;
                }
            }
            "selection" => g.set_selection(single()?)?,
            "treatment" => g.set_treatment(single()?)?,
            "outcome" => g.set_outcome(single()?)?,
            _ => unreachable!(),
        }
    }
    if g.treatment.is_some() && g.treatment == g.outcome {
        return Err(Error::InvalidData(
            "treatment and outcome must differ".into(),
        ));
    }
    Ok(g)
}
