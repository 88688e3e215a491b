use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use crate::error::{Error, Result, Span};

const ITEM_KEYWORDS: [&str; 6] = ["model", "compartments", "params", "init", "flow", "observe"];

/// Parses model source text into a [`ModelSpec`].
///
/// Structural problems (unknown channel, duplicate declaration, bad builtin
/// arity) are parse errors; semantic checks live in [`super::verify`].
pub fn parse(src: &str) -> Result<ModelSpec> {
    let tokens = tokenize(src)?;
    Parser { tokens, pos: 0 }.program()
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

fn err(span: Span, msg: impl Into<String>, expected: &[&str]) -> Error {
    Error::Parse {
        span,
        msg: msg.into(),
        expected: expected.iter().map(|s| s.to_string()).collect(),
    }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn at_ident(&self, word: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(w) if w == word)
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if &self.peek().tok == tok {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<Span> {
        let t = self.peek().clone();
        if t.tok == tok {
            self.next();
            Ok(t.span)
        } else {
            Err(err(
                t.span,
                format!("expected {what}, found {}", t.tok.describe()),
                &[what],
            ))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Span)> {
        let t = self.next();
        match t.tok {
            Tok::Ident(name) => Ok((name, t.span)),
            other => Err(err(
                t.span,
                format!("expected {what}, found {}", other.describe()),
                &[what],
            )),
        }
    }

    fn number(&mut self) -> Result<f64> {
        let negative = self.eat(&Tok::Minus);
        let t = self.next();
        match t.tok {
            Tok::Num(v) => Ok(if negative { -v } else { v }),
            other => Err(err(
                t.span,
                format!("expected number, found {}", other.describe()),
                &["number"],
            )),
        }
    }

    fn program(mut self) -> Result<ModelSpec> {
        let mut spec = ModelSpec {
            name: "model".to_string(),
            compartments: Vec::new(),
            params: Vec::new(),
            init: Vec::new(),
            flows: Vec::new(),
            observation: None,
        };
        let mut named = false;
        loop {
            let t = self.peek().clone();
            match &t.tok {
                Tok::Eof => break,
                Tok::Ident(word) => match word.as_str() {
                    "model" => {
                        self.next();
                        if named {
                            return Err(err(t.span, "duplicate `model` declaration", &["flow", "observe"]));
                        }
                        spec.name = self.ident("model name")?.0;
                        named = true;
                    }
                    "compartments" => {
                        self.next();
                        self.compartments(&mut spec)?;
                    }
                    "params" => {
                        self.next();
                        self.params(&mut spec)?;
                    }
                    "init" => {
                        self.next();
                        let (name, _) = self.ident("compartment name")?;
                        self.expect(Tok::Eq, "`=`")?;
                        let expr = self.expr()?;
                        spec.init.push(InitDecl {
                            compartment: name,
                            expr,
                            span: t.span,
                        });
                    }
                    "flow" => {
                        self.next();
                        let from = self.endpoint()?;
                        self.expect(Tok::Arrow, "`->`")?;
                        let to = self.endpoint()?;
                        self.expect(Tok::Colon, "`:`")?;
                        let rate = self.expr()?;
                        spec.flows.push(Flow {
                            from,
                            to,
                            rate,
                            span: t.span,
                        });
                    }
                    "observe" => {
                        self.next();
                        if spec.observation.is_some() {
                            return Err(err(
                                t.span,
                                "a model has exactly one `observe` expression",
                                &["flow", "init"],
                            ));
                        }
                        let expr = self.expr()?;
                        spec.observation = Some(Observation { expr, span: t.span });
                    }
                    other => {
                        return Err(err(
                            t.span,
                            format!("unexpected `{other}` at start of declaration"),
                            &ITEM_KEYWORDS,
                        ))
                    }
                },
                other => {
                    return Err(err(
                        t.span,
                        format!("unexpected {} at start of declaration", other.describe()),
                        &ITEM_KEYWORDS,
                    ))
                }
            }
        }
        Ok(spec)
    }

    fn compartments(&mut self, spec: &mut ModelSpec) -> Result<()> {
        loop {
            let (name, span) = self.ident("compartment name")?;
            let reserved = KEYWORDS.contains(&name.as_str())
                || name == POPULATION
                || Channel::from_name(&name).is_some()
                || Builtin::from_name(&name).is_some();
            if reserved {
                return Err(err(span, format!("`{name}` is reserved"), &["compartment name"]));
            }
            if spec.compartments.contains(&name) {
                return Err(err(span, format!("compartment `{name}` declared twice"), &["compartment name"]));
            }
            spec.compartments.push(name);
            if !self.eat(&Tok::Comma) {
                return Ok(());
            }
        }
    }

    fn params(&mut self, spec: &mut ModelSpec) -> Result<()> {
        const CHANNEL_NAMES: [&str; 8] = [
            "beta", "alpha", "gamma", "delta", "kappa", "epsilon", "symprob", "mor",
        ];
        loop {
            let (name, span) = self.ident("parameter channel")?;
            let channel = Channel::from_name(&name).ok_or_else(|| {
                err(span, format!("unknown parameter channel `{name}`"), &CHANNEL_NAMES)
            })?;
            if spec.declares(channel) {
                return Err(err(span, format!("parameter `{channel}` declared twice"), &CHANNEL_NAMES));
            }
            let bounds = if self.at_ident("in") {
                self.next();
                self.expect(Tok::LBracket, "`[`")?;
                let lo = self.number()?;
                self.expect(Tok::Comma, "`,`")?;
                let hi = self.number()?;
                self.expect(Tok::RBracket, "`]`")?;
                if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
                    return Err(err(
                        span,
                        format!("bounds of `{channel}` must satisfy 0 <= lo < hi, got [{lo}, {hi}]"),
                        &["bounds"],
                    ));
                }
                Some((lo, hi))
            } else {
                None
            };
            spec.params.push(ParamDecl {
                channel,
                bounds,
                span,
            });
            if !self.eat(&Tok::Comma) {
                return Ok(());
            }
        }
    }

    fn endpoint(&mut self) -> Result<Endpoint> {
        let t = self.next();
        match t.tok {
            Tok::Ident(name) if name == SOURCE => Ok(Endpoint::Source),
            Tok::Ident(name) if name == SINK => Ok(Endpoint::Sink),
            Tok::Ident(name) if !ITEM_KEYWORDS.contains(&name.as_str()) => {
                Ok(Endpoint::Compartment(name))
            }
            other => Err(err(
                t.span,
                format!("expected flow endpoint, found {}", other.describe()),
                &["compartment name", SOURCE, SINK],
            )),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.term()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(&Tok::Minus) {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        let t = self.next();
        match t.tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) if ITEM_KEYWORDS.contains(&name.as_str()) || name == "in" => Err(err(
                t.span,
                format!("expected expression, found keyword `{name}`"),
                &["number", "identifier", "`(`", "`-`"],
            )),
            Tok::Ident(name) => {
                if self.peek().tok != Tok::LParen {
                    let name = match Channel::from_name(&name) {
                        Some(c) => c.name().to_string(),
                        None => name,
                    };
                    return Ok(Expr::Ident(name));
                }
                let builtin = Builtin::from_name(&name).ok_or_else(|| {
                    err(
                        t.span,
                        format!("unknown function `{name}`"),
                        &["foi", "min", "max", "clamp"],
                    )
                })?;
                self.next();
                let mut args = Vec::new();
                if !self.eat(&Tok::RParen) {
                    loop {
                        args.push(self.expr()?);
                        if self.eat(&Tok::Comma) {
                            continue;
                        }
                        self.expect(Tok::RParen, "`)`")?;
                        break;
                    }
                }
                if !builtin.accepts_arity(args.len()) {
                    return Err(err(
                        t.span,
                        format!(
                            "`{}` called with {} argument(s); signature is {}",
                            builtin.name(),
                            args.len(),
                            builtin.signature()
                        ),
                        &[builtin.signature()],
                    ));
                }
                Ok(Expr::Call(builtin, args))
            }
            other => Err(err(
                t.span,
                format!("expected expression, found {}", other.describe()),
                &["number", "identifier", "`(`", "`-`"],
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechdsl::fixtures;

    #[test]
    fn canonical_seirm_shape() {
        let spec = parse(fixtures::CANONICAL_SEIRM).unwrap();
        assert_eq!(spec.compartments, vec!["S", "E", "I", "R", "M"]);
        assert_eq!(spec.flows.len(), 5);
        assert!(spec.observation.is_some());
        assert_eq!(spec.name, "seirm");
    }

    #[test]
    fn missing_flow_target_is_located() {
        let e = parse("compartments S\nflow S -> : beta*S").unwrap_err();
        assert_eq!(e.code(), "PARSE_ERROR");
        let Error::Parse { span, expected, .. } = e else { unreachable!() };
        assert_eq!((span.line, span.col), (2, 11));
        assert!(expected.contains(&"SINK".to_string()));
    }

    #[test]
    fn precedence_and_associativity() {
        let spec = parse("observe a - b - c * d").unwrap();
        let e = spec.observation.unwrap().expr;
        let expected = Expr::bin(
            BinOp::Sub,
            Expr::bin(BinOp::Sub, Expr::ident("a"), Expr::ident("b")),
            Expr::bin(BinOp::Mul, Expr::ident("c"), Expr::ident("d")),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn builtin_arity_is_checked() {
        let e = parse("observe clamp(I, 0)").unwrap_err();
        assert!(e.to_string().contains("clamp(x, lo, hi)"));
        assert!(parse("observe foi() * S").is_ok());
        assert!(parse("observe foi(beta, I)").is_err());
        assert!(parse("observe sqrt(I)").is_err());
    }

    #[test]
    fn eta_aliases_mor() {
        let spec = parse("params eta in [0, 0.1]\nobserve eta * I").unwrap();
        assert_eq!(spec.params[0].channel, Channel::Mor);
        assert_eq!(spec.observation.unwrap().expr, Expr::bin(BinOp::Mul, Expr::ident("mor"), Expr::ident("I")));
    }

    #[test]
    fn structural_declaration_errors() {
        assert!(parse("params bogus").is_err());
        assert!(parse("params beta, beta").is_err());
        assert!(parse("params beta in [0.5, 0.1]").is_err());
        assert!(parse("compartments S, S").is_err());
        assert!(parse("compartments N").is_err());
        assert!(parse("observe I observe E").is_err());
    }
}
