//! Symbolic expression trees over positions, velocities and forcing channels.
//!
//! The grammar is deliberately small: constants, variable references, sums,
//! products, integer powers, sine/cosine and absolute differences of
//! same-kind variables. It is closed under exact partial differentiation,
//! which is what the Euler-Lagrange machinery relies on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Whether a variable refers to a generalized position or velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Position,
    Velocity,
}

/// Reference to one state channel of an `m`-DOF system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Var {
    pub coord: usize,
    pub kind: VarKind,
}

impl Var {
    pub fn x(coord: usize) -> Self {
        Var { coord, kind: VarKind::Position }
    }

    pub fn v(coord: usize) -> Self {
        Var { coord, kind: VarKind::Velocity }
    }
}

/// Symbolic expression node.
///
/// `AbsDiff` is only accepted as the base of a `Power` with exponent >= 2;
/// that is the one configuration whose derivative stays inside this grammar
/// (no division, no sign function). [`Expr::validate`] enforces the rule at
/// parse boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    Var(Var),
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    Power { base: Box<Expr>, exp: u32 },
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    AbsDiff { a: Var, b: Var },
    Forcing(usize),
}

/// Values an expression is evaluated against: one sample of the state and,
/// when present, the forcing channels at the same instant.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub x: &'a [f64],
    pub v: &'a [f64],
    pub f: Option<&'a [f64]>,
}

/// Evaluation failure: the context does not carry what the tree references.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("expression references forcing channel {0} but no forcing data is present")]
    MissingForcing(usize),
    #[error("coordinate index {index} out of range for {len} channels")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Structural violation found by [`Expr::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidExpr {
    #[error("constant is not finite")]
    NonFiniteConst,
    #[error("power exponent must be >= 1")]
    ZeroExponent,
    #[error("absolute difference arguments must have the same kind")]
    MixedKindAbsDiff,
    #[error("absolute difference is only allowed as the base of a power with exponent >= 2")]
    BareAbsDiff,
    #[error("empty sum or product")]
    EmptyNode,
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn x(coord: usize) -> Self {
        Expr::Var(Var::x(coord))
    }

    pub fn v(coord: usize) -> Self {
        Expr::Var(Var::v(coord))
    }

    pub fn sum(terms: Vec<Expr>) -> Self {
        Expr::Sum(terms)
    }

    pub fn product(factors: Vec<Expr>) -> Self {
        Expr::Product(factors)
    }

    pub fn power(base: Expr, exp: u32) -> Self {
        Expr::Power { base: Box::new(base), exp }
    }

    pub fn sin(inner: Expr) -> Self {
        Expr::Sin(Box::new(inner))
    }

    pub fn cos(inner: Expr) -> Self {
        Expr::Cos(Box::new(inner))
    }

    pub fn forcing(channel: usize) -> Self {
        Expr::Forcing(channel)
    }

    pub fn neg(e: Expr) -> Self {
        Expr::Product(vec![Expr::Const(-1.0), e])
    }

    pub fn scaled(c: f64, e: Expr) -> Self {
        Expr::Product(vec![Expr::Const(c), e])
    }

    /// Signed position difference `x_j - x_i`, the building block of
    /// coupling terms. Call with `j > i` to match the library convention.
    pub fn position_diff(j: usize, i: usize) -> Self {
        Expr::Sum(vec![Expr::x(j), Expr::neg(Expr::x(i))])
    }

    /// Evaluates the tree against one sample. Slow path with bounds checks;
    /// hot loops should go through [`CompiledExpr`].
    pub fn eval(&self, ctx: &EvalContext) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(var) => lookup(ctx, *var),
            Expr::Sum(terms) => {
                let mut acc = 0.0;
                for t in terms {
                    acc += t.eval(ctx)?;
                }
                Ok(acc)
            }
            Expr::Product(factors) => {
                let mut acc = 1.0;
                for f in factors {
                    acc *= f.eval(ctx)?;
                }
                Ok(acc)
            }
            Expr::Power { base, exp } => Ok(base.eval(ctx)?.powi(*exp as i32)),
            Expr::Sin(inner) => Ok(inner.eval(ctx)?.sin()),
            Expr::Cos(inner) => Ok(inner.eval(ctx)?.cos()),
            Expr::AbsDiff { a, b } => Ok((lookup(ctx, *a)? - lookup(ctx, *b)?).abs()),
            Expr::Forcing(ch) => match ctx.f {
                Some(f) if *ch < f.len() => Ok(f[*ch]),
                Some(f) => Err(EvalError::IndexOutOfRange { index: *ch, len: f.len() }),
                None => Err(EvalError::MissingForcing(*ch)),
            },
        }
    }

    /// Exact analytic partial derivative with respect to `wrt`.
    ///
    /// The result is not simplified; feed it through [`Expr::simplify`] when
    /// a canonical tree is wanted. Output may contain a bare `AbsDiff`
    /// factor (from odd powers), which is evaluable but not differentiable
    /// again.
    pub fn partial(&self, wrt: Var) -> Expr {
        match self {
            Expr::Const(_) | Expr::Forcing(_) => Expr::Const(0.0),
            Expr::Var(var) => {
                if *var == wrt {
                    Expr::Const(1.0)
                } else {
                    Expr::Const(0.0)
                }
            }
            Expr::Sum(terms) => {
                Expr::Sum(terms.iter().map(|t| t.partial(wrt)).collect())
            }
            Expr::Product(factors) => {
                let mut terms = Vec::new();
                for (i, fi) in factors.iter().enumerate() {
                    if !fi.depends_on(wrt) {
                        continue;
                    }
                    let mut fs: Vec<Expr> = Vec::with_capacity(factors.len());
                    for (j, fj) in factors.iter().enumerate() {
                        fs.push(if i == j { fi.partial(wrt) } else { fj.clone() });
                    }
                    terms.push(Expr::Product(fs));
                }
                if terms.is_empty() {
                    Expr::Const(0.0)
                } else {
                    Expr::Sum(terms)
                }
            }
            Expr::Power { base, exp } => {
                let p = *exp;
                if let Expr::AbsDiff { a, b } = base.as_ref() {
                    return abs_diff_power_partial(*a, *b, p, wrt);
                }
                if !base.depends_on(wrt) {
                    return Expr::Const(0.0);
                }
                let inner = base.partial(wrt);
                match p {
                    1 => inner,
                    2 => Expr::Product(vec![Expr::Const(2.0), (**base).clone(), inner]),
                    _ => Expr::Product(vec![
                        Expr::Const(p as f64),
                        Expr::power((**base).clone(), p - 1),
                        inner,
                    ]),
                }
            }
            Expr::Sin(inner) => {
                Expr::Product(vec![Expr::Cos(inner.clone()), inner.partial(wrt)])
            }
            Expr::Cos(inner) => Expr::Product(vec![
                Expr::Const(-1.0),
                Expr::Sin(inner.clone()),
                inner.partial(wrt),
            ]),
            // Unreachable for validated trees (validate rejects a bare
            // AbsDiff); kept total under the u > 0 branch convention.
            Expr::AbsDiff { a, b } => diff_partial(*a, *b, wrt),
        }
    }

    /// True when the tree references `var` anywhere.
    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) | Expr::Forcing(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Sum(es) | Expr::Product(es) => es.iter().any(|e| e.depends_on(var)),
            Expr::Power { base, .. } => base.depends_on(var),
            Expr::Sin(inner) | Expr::Cos(inner) => inner.depends_on(var),
            Expr::AbsDiff { a, b } => *a == var || *b == var,
        }
    }

    /// True when the tree references coordinate `coord` through either kind.
    pub fn depends_on_coord(&self, coord: usize) -> bool {
        self.depends_on(Var::x(coord)) || self.depends_on(Var::v(coord))
    }

    /// Largest referenced coordinate or forcing index, if any.
    pub fn max_coord(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(v) => Some(v.coord),
            Expr::Forcing(ch) => Some(*ch),
            Expr::Sum(es) | Expr::Product(es) => es.iter().filter_map(|e| e.max_coord()).max(),
            Expr::Power { base, .. } => base.max_coord(),
            Expr::Sin(inner) | Expr::Cos(inner) => inner.max_coord(),
            Expr::AbsDiff { a, b } => Some(a.coord.max(b.coord)),
        }
    }

    /// True when evaluation requires forcing data.
    pub fn needs_forcing(&self) -> bool {
        match self {
            Expr::Forcing(_) => true,
            Expr::Const(_) | Expr::Var(_) | Expr::AbsDiff { .. } => false,
            Expr::Sum(es) | Expr::Product(es) => es.iter().any(Expr::needs_forcing),
            Expr::Power { base, .. } => base.needs_forcing(),
            Expr::Sin(inner) | Expr::Cos(inner) => inner.needs_forcing(),
        }
    }

    /// Checks the structural invariants of the grammar. Parse boundaries
    /// (expression JSON, dictionary files) must call this before use.
    pub fn validate(&self) -> Result<(), InvalidExpr> {
        self.validate_inner(false)
    }

    fn validate_inner(&self, as_power_base: bool) -> Result<(), InvalidExpr> {
        match self {
            Expr::Const(c) => {
                if c.is_finite() {
                    Ok(())
                } else {
                    Err(InvalidExpr::NonFiniteConst)
                }
            }
            Expr::Var(_) | Expr::Forcing(_) => Ok(()),
            Expr::Sum(es) | Expr::Product(es) => {
                if es.is_empty() {
                    return Err(InvalidExpr::EmptyNode);
                }
                es.iter().try_for_each(|e| e.validate_inner(false))
            }
            Expr::Power { base, exp } => {
                if *exp == 0 {
                    return Err(InvalidExpr::ZeroExponent);
                }
                if matches!(base.as_ref(), Expr::AbsDiff { .. }) && *exp < 2 {
                    return Err(InvalidExpr::BareAbsDiff);
                }
                base.validate_inner(true)
            }
            Expr::Sin(inner) | Expr::Cos(inner) => inner.validate_inner(false),
            Expr::AbsDiff { a, b } => {
                if a.kind != b.kind {
                    Err(InvalidExpr::MixedKindAbsDiff)
                } else if as_power_base {
                    Ok(())
                } else {
                    Err(InvalidExpr::BareAbsDiff)
                }
            }
        }
    }

    /// Canonical simplification: flattens nested sums/products, folds
    /// constants, merges like terms and repeated factors, drops exact zeros
    /// and orders operands deterministically. Two trees representing the
    /// same formal polynomial-harmonic combination simplify to identical
    /// trees and therefore render identically.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(clean_zero(*c)),
            Expr::Var(_) | Expr::Forcing(_) => self.clone(),
            Expr::Sin(inner) => match inner.simplify() {
                Expr::Const(c) => Expr::Const(clean_zero(c.sin())),
                e => Expr::sin(e),
            },
            Expr::Cos(inner) => match inner.simplify() {
                Expr::Const(c) => Expr::Const(c.cos()),
                e => Expr::cos(e),
            },
            Expr::AbsDiff { a, b } => {
                if a == b {
                    Expr::Const(0.0)
                } else if a.coord < b.coord {
                    Expr::AbsDiff { a: *b, b: *a }
                } else {
                    self.clone()
                }
            }
            Expr::Power { base, exp } => simplify_power(base.simplify(), *exp),
            Expr::Product(factors) => {
                simplify_product(factors.iter().map(|f| f.simplify()).collect())
            }
            Expr::Sum(terms) => simplify_sum(terms.iter().map(|t| t.simplify()).collect()),
        }
    }

    /// Renders the canonical text form. Operands of sums and products are
    /// ordered deterministically, so structurally equal trees (up to operand
    /// order) produce identical strings.
    pub fn render(&self) -> String {
        render_node(self, false)
    }

    /// Compiles to a flat stack program for allocation-free evaluation.
    pub fn compile(&self, coords: usize, has_forcing: bool) -> Result<CompiledExpr, EvalError> {
        CompiledExpr::new(self, coords, has_forcing)
    }
}

fn lookup(ctx: &EvalContext, var: Var) -> Result<f64, EvalError> {
    let slice = match var.kind {
        VarKind::Position => ctx.x,
        VarKind::Velocity => ctx.v,
    };
    slice
        .get(var.coord)
        .copied()
        .ok_or(EvalError::IndexOutOfRange { index: var.coord, len: slice.len() })
}

/// d/d`wrt` of the signed difference `a - b`: one of -1, 0, 1.
fn diff_partial(a: Var, b: Var, wrt: Var) -> Expr {
    let s = (a == wrt) as i32 - (b == wrt) as i32;
    Expr::Const(s as f64)
}

/// d/d`wrt` of `|a - b|^p` for p >= 2, which equals
/// `p * |a-b|^(p-2) * (a-b) * d(a-b)`. Even powers are emitted in signed
/// form since `|u|^p = u^p` there.
fn abs_diff_power_partial(a: Var, b: Var, p: u32, wrt: Var) -> Expr {
    let s = (a == wrt) as i32 - (b == wrt) as i32;
    if s == 0 {
        return Expr::Const(0.0);
    }
    let u = Expr::Sum(vec![Expr::Var(a), Expr::neg(Expr::Var(b))]);
    let lead = Expr::Const((p as i32 * s) as f64);
    if p % 2 == 0 {
        if p == 2 {
            Expr::Product(vec![lead, u])
        } else {
            Expr::Product(vec![lead, Expr::power(u, p - 1)])
        }
    } else {
        let abs = Expr::AbsDiff { a, b };
        let abs_part = if p == 3 { abs } else { Expr::power(abs, p - 2) };
        Expr::Product(vec![lead, abs_part, u])
    }
}

fn clean_zero(c: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c
    }
}

/// Total deterministic order used for canonical operand sorting. Velocity
/// references sort before positions so kinetic terms lead a Lagrangian.
pub fn cmp_expr(a: &Expr, b: &Expr) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let rank = |e: &Expr| -> u8 {
        match e {
            Expr::Const(_) => 0,
            Expr::Var(_) => 1,
            Expr::Power { .. } => 2,
            Expr::Product(_) => 3,
            Expr::Sum(_) => 4,
            Expr::Sin(_) => 5,
            Expr::Cos(_) => 6,
            Expr::AbsDiff { .. } => 7,
            Expr::Forcing(_) => 8,
        }
    };
    match rank(a).cmp(&rank(b)) {
        Ordering::Equal => {}
        other => return other,
    }
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => x.total_cmp(y),
        (Expr::Var(x), Expr::Var(y)) => cmp_var(x, y),
        (Expr::Power { base: ba, exp: ea }, Expr::Power { base: bb, exp: eb }) => {
            cmp_expr(ba, bb).then(ea.cmp(eb))
        }
        (Expr::Product(xs), Expr::Product(ys)) | (Expr::Sum(xs), Expr::Sum(ys)) => {
            for (x, y) in xs.iter().zip(ys.iter()) {
                match cmp_expr(x, y) {
                    Ordering::Equal => continue,
                    other => return other,
                }
            }
            xs.len().cmp(&ys.len())
        }
        (Expr::Sin(x), Expr::Sin(y)) | (Expr::Cos(x), Expr::Cos(y)) => cmp_expr(x, y),
        (Expr::AbsDiff { a: aa, b: ab }, Expr::AbsDiff { a: ba, b: bb }) => {
            cmp_var(aa, ba).then(cmp_var(ab, bb))
        }
        (Expr::Forcing(x), Expr::Forcing(y)) => x.cmp(y),
        _ => unreachable!("rank already distinguished variants"),
    }
}

fn cmp_var(a: &Var, b: &Var) -> std::cmp::Ordering {
    let kind_rank = |k: VarKind| match k {
        VarKind::Velocity => 0u8,
        VarKind::Position => 1,
    };
    kind_rank(a.kind).cmp(&kind_rank(b.kind)).then(a.coord.cmp(&b.coord))
}

fn simplify_power(base: Expr, exp: u32) -> Expr {
    if exp == 0 {
        return Expr::Const(1.0);
    }
    if exp == 1 {
        return base;
    }
    match base {
        Expr::Const(c) => Expr::Const(c.powi(exp as i32)),
        Expr::Power { base: inner, exp: e2 } => simplify_power(*inner, exp.saturating_mul(e2)),
        Expr::Product(fs) => {
            simplify_product(fs.into_iter().map(|f| simplify_power(f, exp)).collect())
        }
        // |u|^even == u^even; canonicalize to the signed form.
        Expr::AbsDiff { a, b } if exp % 2 == 0 => {
            let signed = Expr::Sum(vec![Expr::Var(a), Expr::neg(Expr::Var(b))]);
            simplify_power(signed.simplify(), exp)
        }
        other => Expr::Power { base: Box::new(other), exp },
    }
}

fn simplify_product(factors: Vec<Expr>) -> Expr {
    // Flatten, fold constants, then merge repeated bases into powers.
    let mut coeff = 1.0f64;
    let mut rest: Vec<(Expr, u32)> = Vec::new();
    let mut stack: Vec<Expr> = factors;
    stack.reverse();
    while let Some(f) = stack.pop() {
        match f {
            Expr::Const(c) => coeff *= c,
            Expr::Product(fs) => {
                for f in fs.into_iter().rev() {
                    stack.push(f);
                }
            }
            Expr::Power { base, exp } => rest.push((*base, exp)),
            other => rest.push((other, 1)),
        }
    }
    if coeff == 0.0 {
        return Expr::Const(0.0);
    }
    rest.sort_by(|(a, ea), (b, eb)| cmp_expr(a, b).then(ea.cmp(eb)));
    let mut merged: Vec<(Expr, u32)> = Vec::with_capacity(rest.len());
    for (base, exp) in rest {
        match merged.last_mut() {
            Some((prev, pe)) if *prev == base => *pe += exp,
            _ => merged.push((base, exp)),
        }
    }
    let mut out: Vec<Expr> = Vec::with_capacity(merged.len() + 1);
    if coeff != 1.0 {
        out.push(Expr::Const(clean_zero(coeff)));
    }
    for (base, exp) in merged {
        out.push(simplify_power(base, exp));
    }
    match out.len() {
        0 => Expr::Const(1.0),
        1 => out.pop().unwrap(),
        _ => Expr::Product(out),
    }
}

/// Splits a simplified term into (coefficient, non-constant part).
fn split_coeff(term: Expr) -> (f64, Option<Expr>) {
    match term {
        Expr::Const(c) => (c, None),
        Expr::Product(fs) => {
            let mut coeff = 1.0;
            let mut rest = Vec::with_capacity(fs.len());
            for f in fs {
                match f {
                    Expr::Const(c) => coeff *= c,
                    other => rest.push(other),
                }
            }
            match rest.len() {
                0 => (coeff, None),
                1 => (coeff, Some(rest.pop().unwrap())),
                _ => (coeff, Some(Expr::Product(rest))),
            }
        }
        other => (1.0, Some(other)),
    }
}

fn simplify_sum(terms: Vec<Expr>) -> Expr {
    let mut flat: Vec<Expr> = Vec::with_capacity(terms.len());
    let mut stack: Vec<Expr> = terms;
    stack.reverse();
    while let Some(t) = stack.pop() {
        match t {
            Expr::Sum(ts) => {
                for t in ts.into_iter().rev() {
                    stack.push(t);
                }
            }
            other => flat.push(other),
        }
    }
    let mut const_acc = 0.0f64;
    let mut parts: Vec<(f64, Expr)> = Vec::with_capacity(flat.len());
    for t in flat {
        let (c, rest) = split_coeff(t);
        match rest {
            None => const_acc += c,
            Some(r) => parts.push((c, r)),
        }
    }
    parts.sort_by(|(_, a), (_, b)| cmp_expr(a, b));
    let mut merged: Vec<(f64, Expr)> = Vec::with_capacity(parts.len());
    for (c, r) in parts {
        match merged.last_mut() {
            Some((pc, pr)) if *pr == r => *pc += c,
            _ => merged.push((c, r)),
        }
    }
    let mut out: Vec<Expr> = Vec::with_capacity(merged.len() + 1);
    for (c, r) in merged {
        if c == 0.0 {
            continue;
        }
        if c == 1.0 {
            out.push(r);
        } else {
            out.push(simplify_product(vec![Expr::Const(c), r]));
        }
    }
    if const_acc != 0.0 || out.is_empty() {
        out.push(Expr::Const(clean_zero(const_acc)));
    }
    match out.len() {
        1 => out.pop().unwrap(),
        _ => Expr::Sum(out),
    }
}

fn fmt_const(c: f64) -> String {
    format!("{c}")
}

fn render_node(e: &Expr, parenthesize_sum: bool) -> String {
    match e {
        Expr::Const(c) => fmt_const(*c),
        Expr::Var(v) => render_var(v),
        Expr::Forcing(ch) => format!("f{ch}"),
        Expr::Sin(inner) => format!("sin({})", render_node(inner, false)),
        Expr::Cos(inner) => format!("cos({})", render_node(inner, false)),
        Expr::AbsDiff { a, b } => format!("|{} - {}|", render_var(a), render_var(b)),
        Expr::Power { base, exp } => {
            let needs_parens = matches!(
                base.as_ref(),
                Expr::Sum(_) | Expr::Product(_) | Expr::Power { .. } | Expr::Const(_)
            );
            let b = render_node(base, false);
            if needs_parens {
                format!("({b})^{exp}")
            } else {
                format!("{b}^{exp}")
            }
        }
        Expr::Product(factors) => {
            let mut fs: Vec<&Expr> = factors.iter().collect();
            fs.sort_by(|a, b| cmp_expr(a, b));
            let rendered: Vec<String> = fs
                .iter()
                .filter(|f| !matches!(f, Expr::Const(c) if *c == 1.0))
                .map(|f| render_node(f, true))
                .collect();
            if rendered.is_empty() {
                "1".to_string()
            } else {
                rendered.join("*")
            }
        }
        Expr::Sum(terms) => {
            let mut ts: Vec<&Expr> = terms.iter().collect();
            ts.sort_by(|a, b| sum_term_cmp(a, b));
            let mut out = String::new();
            for (i, t) in ts.iter().enumerate() {
                let (neg, body) = signed_term(t);
                if i == 0 {
                    if neg {
                        out.push('-');
                    }
                } else if neg {
                    out.push_str(" - ");
                } else {
                    out.push_str(" + ");
                }
                out.push_str(&body);
            }
            if parenthesize_sum {
                format!("({out})")
            } else {
                out
            }
        }
    }
}

/// Orders sum terms for display: positive terms first, then negative ones,
/// each group ordered by its non-constant part; pure constants go last. The
/// positive-first rule writes differences as `x1 - x0` rather than
/// `-x0 + x1`.
fn sum_term_cmp(a: &Expr, b: &Expr) -> std::cmp::Ordering {
    let key = |e: &Expr| -> (bool, bool, Expr) {
        let (c, rest) = split_coeff(e.clone());
        match rest {
            None => (true, c < 0.0, Expr::Const(0.0)),
            Some(r) => (false, c < 0.0, r),
        }
    };
    let (ca, na, ka) = key(a);
    let (cb, nb, kb) = key(b);
    ca.cmp(&cb)
        .then(na.cmp(&nb))
        .then_with(|| cmp_expr(&ka, &kb))
}

/// Splits a term into its sign and the rendering of its magnitude.
fn signed_term(t: &Expr) -> (bool, String) {
    let (c, rest) = split_coeff(t.clone());
    let neg = c < 0.0;
    let mag = c.abs();
    let body = match rest {
        None => fmt_const(mag),
        Some(r) => {
            if mag == 1.0 {
                render_node(&r, true)
            } else {
                let factors = match r {
                    Expr::Product(mut fs) => {
                        fs.insert(0, Expr::Const(mag));
                        Expr::Product(fs)
                    }
                    other => Expr::Product(vec![Expr::Const(mag), other]),
                };
                render_node(&factors, true)
            }
        }
    };
    (neg, body)
}

fn render_var(v: &Var) -> String {
    match v.kind {
        VarKind::Position => format!("x{}", v.coord),
        VarKind::Velocity => format!("v{}", v.coord),
    }
}

/// Stack-machine instruction of a [`CompiledExpr`].
#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    X(u32),
    V(u32),
    F(u32),
    Add(u32),
    Mul(u32),
    Powi(u32),
    Sin,
    Cos,
    Sub,
    Abs,
}

/// Flat postfix form of an [`Expr`] for fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    max_depth: usize,
}

impl CompiledExpr {
    fn new(e: &Expr, coords: usize, has_forcing: bool) -> Result<Self, EvalError> {
        let mut ops = Vec::new();
        compile_node(e, coords, has_forcing, &mut ops)?;
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::X(_) | Op::V(_) | Op::F(_) => depth += 1,
                Op::Add(n) | Op::Mul(n) => depth = depth - *n as usize + 1,
                Op::Sub => depth -= 1,
                Op::Powi(_) | Op::Sin | Op::Cos | Op::Abs => {}
            }
            max_depth = max_depth.max(depth);
        }
        Ok(CompiledExpr { ops, max_depth })
    }

    /// Evaluates with caller-provided scratch space. The scratch vector is
    /// cleared internally and can be reused across calls.
    pub fn eval_with(&self, x: &[f64], v: &[f64], f: Option<&[f64]>, scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.reserve(self.max_depth);
        for op in &self.ops {
            match op {
                Op::Const(c) => scratch.push(*c),
                Op::X(i) => scratch.push(x[*i as usize]),
                Op::V(i) => scratch.push(v[*i as usize]),
                Op::F(i) => scratch.push(f.expect("forcing checked at compile")[*i as usize]),
                Op::Add(n) => {
                    let cut = scratch.len() - *n as usize;
                    let s: f64 = scratch[cut..].iter().sum();
                    scratch.truncate(cut);
                    scratch.push(s);
                }
                Op::Mul(n) => {
                    let cut = scratch.len() - *n as usize;
                    let p: f64 = scratch[cut..].iter().product();
                    scratch.truncate(cut);
                    scratch.push(p);
                }
                Op::Powi(p) => {
                    let t = scratch.last_mut().unwrap();
                    *t = t.powi(*p as i32);
                }
                Op::Sin => {
                    let t = scratch.last_mut().unwrap();
                    *t = t.sin();
                }
                Op::Cos => {
                    let t = scratch.last_mut().unwrap();
                    *t = t.cos();
                }
                Op::Sub => {
                    let b = scratch.pop().unwrap();
                    let t = scratch.last_mut().unwrap();
                    *t -= b;
                }
                Op::Abs => {
                    let t = scratch.last_mut().unwrap();
                    *t = t.abs();
                }
            }
        }
        scratch[0]
    }

    /// Convenience wrapper allocating its own scratch.
    pub fn eval(&self, x: &[f64], v: &[f64], f: Option<&[f64]>) -> f64 {
        let mut scratch = Vec::with_capacity(self.max_depth);
        self.eval_with(x, v, f, &mut scratch)
    }
}

fn compile_var(var: Var, coords: usize, ops: &mut Vec<Op>) -> Result<(), EvalError> {
    if var.coord >= coords {
        return Err(EvalError::IndexOutOfRange { index: var.coord, len: coords });
    }
    ops.push(match var.kind {
        VarKind::Position => Op::X(var.coord as u32),
        VarKind::Velocity => Op::V(var.coord as u32),
    });
    Ok(())
}

fn compile_node(
    e: &Expr,
    coords: usize,
    has_forcing: bool,
    ops: &mut Vec<Op>,
) -> Result<(), EvalError> {
    match e {
        Expr::Const(c) => ops.push(Op::Const(*c)),
        Expr::Var(v) => compile_var(*v, coords, ops)?,
        Expr::Forcing(ch) => {
            if !has_forcing {
                return Err(EvalError::MissingForcing(*ch));
            }
            if *ch >= coords {
                return Err(EvalError::IndexOutOfRange { index: *ch, len: coords });
            }
            ops.push(Op::F(*ch as u32));
        }
        Expr::Sum(terms) => {
            for t in terms {
                compile_node(t, coords, has_forcing, ops)?;
            }
            ops.push(Op::Add(terms.len() as u32));
        }
        Expr::Product(factors) => {
            for f in factors {
                compile_node(f, coords, has_forcing, ops)?;
            }
            ops.push(Op::Mul(factors.len() as u32));
        }
        Expr::Power { base, exp } => {
            compile_node(base, coords, has_forcing, ops)?;
            ops.push(Op::Powi(*exp));
        }
        Expr::Sin(inner) => {
            compile_node(inner, coords, has_forcing, ops)?;
            ops.push(Op::Sin);
        }
        Expr::Cos(inner) => {
            compile_node(inner, coords, has_forcing, ops)?;
            ops.push(Op::Cos);
        }
        Expr::AbsDiff { a, b } => {
            compile_var(*a, coords, ops)?;
            compile_var(*b, coords, ops)?;
            ops.push(Op::Sub);
            ops.push(Op::Abs);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(x: &'a [f64], v: &'a [f64]) -> EvalContext<'a> {
        EvalContext { x, v, f: None }
    }

    #[test]
    fn eval_basics() {
        let e = Expr::Const(2.5);
        assert_eq!(e.eval(&ctx(&[], &[])).unwrap(), 2.5);

        let e = Expr::power(Expr::x(0), 3);
        assert_eq!(e.eval(&ctx(&[2.0], &[0.0])).unwrap(), 8.0);

        let e = Expr::sum(vec![Expr::x(0), Expr::v(0)]);
        assert_eq!(e.eval(&ctx(&[1.5], &[-0.5])).unwrap(), 1.0);

        let e = Expr::product(vec![Expr::Const(3.0), Expr::x(1)]);
        assert_eq!(e.eval(&ctx(&[0.0, 4.0], &[0.0, 0.0])).unwrap(), 12.0);

        let e = Expr::Power {
            base: Box::new(Expr::AbsDiff { a: Var::x(1), b: Var::x(0) }),
            exp: 2,
        };
        assert_eq!(e.eval(&ctx(&[3.0, 1.0], &[0.0, 0.0])).unwrap(), 4.0);
    }

    #[test]
    fn eval_reports_missing_forcing() {
        let e = Expr::product(vec![Expr::x(0), Expr::forcing(0)]);
        assert_eq!(
            e.eval(&ctx(&[1.0], &[0.0])).unwrap_err(),
            EvalError::MissingForcing(0)
        );
        let c = EvalContext { x: &[1.0], v: &[0.0], f: Some(&[2.0]) };
        assert_eq!(e.eval(&c).unwrap(), 2.0);
    }

    #[test]
    fn partial_power_rule() {
        // d/dx x^3 = 3 x^2
        let e = Expr::power(Expr::x(0), 3);
        let d = e.partial(Var::x(0)).simplify();
        let expect = Expr::scaled(3.0, Expr::power(Expr::x(0), 2)).simplify();
        assert_eq!(d, expect);
    }

    #[test]
    fn partial_cos_is_minus_sin() {
        let e = Expr::cos(Expr::x(0));
        let d = e.partial(Var::x(0)).simplify();
        let expect = Expr::neg(Expr::sin(Expr::x(0))).simplify();
        assert_eq!(d, expect);
    }

    #[test]
    fn partial_of_unrelated_var_is_zero() {
        let e = Expr::power(Expr::x(0), 2);
        assert_eq!(e.partial(Var::v(0)).simplify(), Expr::Const(0.0));
        assert_eq!(e.partial(Var::x(1)).simplify(), Expr::Const(0.0));
    }

    #[test]
    fn partial_matches_finite_difference_on_coupling_term() {
        // d/dx1 (x1 - x0)^2 at several random-ish points, against central
        // differences.
        let e = Expr::power(Expr::position_diff(1, 0), 2);
        let d = e.partial(Var::x(1)).simplify();
        let points = [
            [0.3, -1.2],
            [1.7, 0.4],
            [-0.9, -0.1],
            [2.2, 2.1],
            [0.0, 5.0],
        ];
        let h = 1e-6;
        for p in points {
            let exact = d.eval(&ctx(&p, &[0.0, 0.0])).unwrap();
            let mut hi = p;
            let mut lo = p;
            hi[1] += h;
            lo[1] -= h;
            let fd = (e.eval(&ctx(&hi, &[0.0, 0.0])).unwrap()
                - e.eval(&ctx(&lo, &[0.0, 0.0])).unwrap())
                / (2.0 * h);
            assert!((exact - fd).abs() < 1e-8, "exact {exact} vs fd {fd}");
        }
    }

    #[test]
    fn abs_diff_odd_power_partial_evaluates_correctly() {
        // d/dx0 |x0 - x1|^3 = 3 |u| u  with u = x0 - x1.
        let e = Expr::Power {
            base: Box::new(Expr::AbsDiff { a: Var::x(0), b: Var::x(1) }),
            exp: 3,
        };
        let d = e.partial(Var::x(0));
        for (x0, x1) in [(2.0, 0.5), (-1.0, 1.0), (0.25, 3.0)] {
            let u: f64 = x0 - x1;
            let expect = 3.0 * u.abs() * u;
            let got = d.eval(&ctx(&[x0, x1], &[0.0, 0.0])).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn simplify_collects_like_terms() {
        // 2 x0 + 3 x0 -> 5 x0
        let e = Expr::sum(vec![
            Expr::scaled(2.0, Expr::x(0)),
            Expr::scaled(3.0, Expr::x(0)),
        ]);
        assert_eq!(e.simplify(), Expr::scaled(5.0, Expr::x(0)).simplify());
        assert_eq!(e.simplify().render(), "5*x0");
    }

    #[test]
    fn simplify_drops_zeros_and_folds_constants() {
        let e = Expr::sum(vec![
            Expr::Const(0.0),
            Expr::product(vec![Expr::Const(0.0), Expr::x(0)]),
            Expr::scaled(2.0, Expr::Const(3.0)),
        ]);
        assert_eq!(e.simplify(), Expr::Const(6.0));

        let e = Expr::product(vec![Expr::Const(1.0), Expr::x(0)]);
        assert_eq!(e.simplify(), Expr::x(0));
    }

    #[test]
    fn simplify_merges_repeated_factors_into_powers() {
        let e = Expr::product(vec![Expr::v(0), Expr::v(0)]);
        assert_eq!(e.simplify(), Expr::power(Expr::v(0), 2));
    }

    #[test]
    fn simplify_is_semantics_preserving() {
        let e = Expr::sum(vec![
            Expr::product(vec![
                Expr::Const(2.0),
                Expr::power(Expr::sum(vec![Expr::x(1), Expr::neg(Expr::x(0))]), 2),
            ]),
            Expr::sin(Expr::x(0)),
            Expr::product(vec![Expr::v(1), Expr::v(1), Expr::Const(-0.5)]),
        ]);
        let s = e.simplify();
        let xs = [[0.4, -0.7], [1.1, 2.3], [-2.0, 0.0]];
        let vs = [[0.1, -1.0], [3.0, 0.5], [0.0, 2.0]];
        for (x, v) in xs.iter().zip(vs.iter()) {
            let a = e.eval(&ctx(x, v)).unwrap();
            let b = s.eval(&ctx(x, v)).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn render_canonical_lagrangian() {
        // 0.5 v0^2 - 250 x0^2, built in scrambled order.
        let e = Expr::sum(vec![
            Expr::scaled(-250.0, Expr::power(Expr::x(0), 2)),
            Expr::scaled(0.5, Expr::power(Expr::v(0), 2)),
        ]);
        assert_eq!(e.simplify().render(), "0.5*v0^2 - 250*x0^2");
    }

    #[test]
    fn render_zero_and_harmonics() {
        assert_eq!(Expr::Const(0.0).render(), "0");
        assert_eq!(Expr::cos(Expr::x(0)).render(), "cos(x0)");
        assert_eq!(
            Expr::power(Expr::position_diff(1, 0), 2).render(),
            "(x1 - x0)^2"
        );
    }

    #[test]
    fn render_is_order_insensitive() {
        let a = Expr::sum(vec![Expr::x(0), Expr::v(0)]);
        let b = Expr::sum(vec![Expr::v(0), Expr::x(0)]);
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn validate_rules() {
        assert!(Expr::power(Expr::x(0), 2).validate().is_ok());
        assert_eq!(
            Expr::Power { base: Box::new(Expr::x(0)), exp: 0 }.validate(),
            Err(InvalidExpr::ZeroExponent)
        );
        assert_eq!(
            Expr::Const(f64::NAN).validate(),
            Err(InvalidExpr::NonFiniteConst)
        );
        let bare = Expr::AbsDiff { a: Var::x(1), b: Var::x(0) };
        assert_eq!(bare.validate(), Err(InvalidExpr::BareAbsDiff));
        let under_sin = Expr::sin(bare.clone());
        assert_eq!(under_sin.validate(), Err(InvalidExpr::BareAbsDiff));
        let squared = Expr::Power { base: Box::new(bare), exp: 2 };
        assert!(squared.validate().is_ok());
        let mixed = Expr::Power {
            base: Box::new(Expr::AbsDiff { a: Var::x(0), b: Var::v(0) }),
            exp: 2,
        };
        assert_eq!(mixed.validate(), Err(InvalidExpr::MixedKindAbsDiff));
    }

    #[test]
    fn serde_roundtrip() {
        let e = Expr::sum(vec![
            Expr::scaled(0.5, Expr::power(Expr::v(0), 2)),
            Expr::neg(Expr::cos(Expr::x(0))),
            Expr::product(vec![Expr::x(0), Expr::forcing(0)]),
        ]);
        let json = serde_json::to_string(&e).unwrap();
        let back: Expr = serde_json::from_str(&json).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn compiled_matches_tree_eval() {
        let e = Expr::sum(vec![
            Expr::scaled(2.0, Expr::power(Expr::position_diff(1, 0), 2)),
            Expr::sin(Expr::v(1)),
            Expr::product(vec![Expr::x(0), Expr::forcing(1)]),
        ]);
        let c = e.compile(2, true).unwrap();
        let x = [0.3, -0.8];
        let v = [1.2, 0.7];
        let f = [0.0, 2.5];
        let cx = EvalContext { x: &x, v: &v, f: Some(&f) };
        let a = e.eval(&cx).unwrap();
        let b = c.eval(&x, &v, Some(&f));
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn compile_rejects_out_of_range() {
        assert!(Expr::x(3).compile(3, false).is_err());
        assert!(Expr::forcing(0).compile(1, false).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let e = Expr::sum(vec![
            Expr::sin(Expr::scaled(3.7, Expr::x(0))),
            Expr::power(Expr::v(0), 4),
        ]);
        let c = ctx(&[0.123456789], &[-0.987654321]);
        let a = e.eval(&c).unwrap();
        let b = e.eval(&c).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
