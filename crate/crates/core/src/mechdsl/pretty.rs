use std::fmt::Write;

use super::ast::*;

/// Canonical text form. `parse(pretty(spec))` reproduces `spec` structurally.
pub fn pretty(spec: &ModelSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model {}", spec.name);
    if !spec.compartments.is_empty() {
        let _ = writeln!(out, "compartments {}", spec.compartments.join(", "));
    }
    if !spec.params.is_empty() {
        let decls: Vec<String> = spec
            .params
            .iter()
            .map(|p| match p.bounds {
                Some((lo, hi)) => format!("{} in [{}, {}]", p.channel, number(lo), number(hi)),
                None => p.channel.to_string(),
            })
            .collect();
        let _ = writeln!(out, "params {}", decls.join(", "));
    }
    for i in &spec.init {
        let _ = writeln!(out, "init {} = {}", i.compartment, expr(&i.expr));
    }
    for f in &spec.flows {
        let _ = writeln!(out, "flow {} -> {} : {}", f.from, f.to, expr(&f.rate));
    }
    if let Some(o) = &spec.observation {
        let _ = writeln!(out, "observe {}", expr(&o.expr));
    }
    out
}

pub fn number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

pub fn expr(e: &Expr) -> String {
    match e {
        Expr::Num(v) => number(*v),
        Expr::Ident(name) => name.clone(),
        Expr::Neg(inner) => format!("-{}", wrap(inner, inner.precedence() < 3)),
        Expr::Binary(op, l, r) => {
            let p = op.precedence();
            format!(
                "{} {} {}",
                wrap(l, l.precedence() < p),
                op.symbol(),
                wrap(r, r.precedence() <= p)
            )
        }
        Expr::Call(b, args) => {
            let args: Vec<String> = args.iter().map(expr).collect();
            format!("{}({})", b.name(), args.join(", "))
        }
    }
}

/// One `dX/dt = ...` line per compartment followed by the observation.
pub fn equations(spec: &ModelSpec) -> String {
    let mut out = String::new();
    for c in &spec.compartments {
        let mut rhs = String::new();
        for f in &spec.flows {
            let sign = match (f.from.compartment() == Some(c.as_str()), f.to.compartment() == Some(c.as_str())) {
                (true, false) => "-",
                (false, true) => "+",
                _ => continue,
            };
            let term = wrap(&f.rate, f.rate.precedence() < 2);
            if rhs.is_empty() && sign == "+" {
                rhs.push_str(&term);
            } else if rhs.is_empty() {
                let _ = write!(rhs, "-{term}");
            } else {
                let _ = write!(rhs, " {sign} {term}");
            }
        }
        if rhs.is_empty() {
            rhs.push('0');
        }
        let _ = writeln!(out, "d{c}/dt = {rhs}");
    }
    if let Some(o) = &spec.observation {
        let _ = writeln!(out, "y = {}", expr(&o.expr));
    }
    out
}

fn wrap(e: &Expr, parens: bool) -> String {
    if parens {
        format!("({})", expr(e))
    } else {
        expr(e)
    }
}
