//! Arithmetic circuits over two parties' private inputs.
//!
//! Gates are stored in topological order; the last gate is the output. A
//! `Local` gate is an expression one party can evaluate on its own inputs,
//! produced by [`local_compute`].

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::error::CircuitError;

/// Variable identifier.
pub type VarKey = u64;

/// The two protocol roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Party {
    /// Holds the secret key.
    KeyHolder,
    /// Computes on ciphertexts.
    Evaluator,
}

/// Expression over one party's variables.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Var(VarKey),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, vars: &HashMap<VarKey, f64>) -> Result<f64, CircuitError> {
        Ok(match self {
            Expr::Var(v) => *vars.get(v).ok_or(CircuitError::MissingVariable(*v))?,
            Expr::Add(a, b) => a.eval(vars)? + b.eval(vars)?,
            Expr::Mul(a, b) => a.eval(vars)? * b.eval(vars)?,
        })
    }

    /// Polynomial degree; the fixed-point level of the expression's value.
    pub fn degree(&self) -> u32 {
        match self {
            Expr::Var(_) => 1,
            Expr::Add(a, b) => a.degree().max(b.degree()),
            Expr::Mul(a, b) => a.degree() + b.degree(),
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    fn fmt_into(&self, out: &mut String) {
        match self {
            Expr::Var(v) => out.push_str(&format!("x{v}")),
            Expr::Add(a, b) | Expr::Mul(a, b) => {
                out.push('(');
                a.fmt_into(out);
                out.push_str(if matches!(self, Expr::Add(..)) { " + " } else { " * " });
                b.fmt_into(out);
                out.push(')');
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    Input { owner: Party, var: VarKey },
    Add,
    Mul,
    Local { owner: Party, expr: Expr },
}

impl Gate {
    /// Owner if the gate's value is known in the clear to one party.
    pub fn owner(&self) -> Option<Party> {
        match self {
            Gate::Input { owner, .. } | Gate::Local { owner, .. } => Some(*owner),
            _ => None,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Gate::Input { .. } | Gate::Local { .. } => 0,
            Gate::Add | Gate::Mul => 2,
        }
    }
}

/// A validated circuit: gates in topological order, `wires[i]` lists the inputs of gate `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    gates: Vec<Gate>,
    wires: Vec<Vec<usize>>,
}

impl Circuit {
    pub fn new(gates: Vec<Gate>, wires: Vec<Vec<usize>>) -> Result<Self, CircuitError> {
        if gates.is_empty() {
            return Err(CircuitError::Empty);
        }
        if gates.len() != wires.len() {
            return Err(CircuitError::WireCount { gates: gates.len(), wires: wires.len() });
        }
        let mut consumed = vec![false; gates.len()];
        let mut owners: HashMap<VarKey, Party> = HashMap::new();
        for (i, (g, w)) in gates.iter().zip(&wires).enumerate() {
            if w.len() != g.arity() {
                return Err(CircuitError::Arity { gate: i, expected: g.arity(), got: w.len() });
            }
            for &j in w {
                if j >= i {
                    return Err(CircuitError::NotTopological { gate: i, input: j });
                }
                consumed[j] = true;
            }
            let mut note = |var: VarKey, owner: Party| -> Result<(), CircuitError> {
                match owners.insert(var, owner) {
                    Some(prev) if prev != owner => Err(CircuitError::SharedVariable(var)),
                    _ => Ok(()),
                }
            };
            match g {
                Gate::Input { owner, var } => note(*var, *owner)?,
                Gate::Local { owner, expr } => {
                    let mut vars = Vec::new();
                    collect_vars(expr, &mut vars);
                    for v in vars {
                        note(v, *owner)?;
                    }
                }
                _ => {}
            }
        }
        if let Some(i) = consumed[..gates.len() - 1].iter().position(|c| !c) {
            return Err(CircuitError::DanglingGate(i));
        }
        Ok(Circuit { gates, wires })
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn wires(&self) -> &[Vec<usize>] {
        &self.wires
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn output(&self) -> usize {
        self.gates.len() - 1
    }

    /// Debug dump with optional levels.
    pub fn dump(&self, levels: Option<&LevelMap>) -> String {
        let mut s = String::new();
        for (i, (g, w)) in self.gates.iter().zip(&self.wires).enumerate() {
            let desc = match g {
                Gate::Input { owner, var } => format!("input {owner:?} x{var}"),
                Gate::Add => format!("add g{} g{}", w[0], w[1]),
                Gate::Mul => format!("mul g{} g{}", w[0], w[1]),
                Gate::Local { owner, expr } => {
                    let mut e = String::new();
                    expr.fmt_into(&mut e);
                    format!("local {owner:?} {e}")
                }
            };
            match levels {
                Some(l) => s.push_str(&format!("g{i}: {desc} [level {}]\n", l.level(i))),
                None => s.push_str(&format!("g{i}: {desc}\n")),
            }
        }
        s
    }
}

impl fmt::Display for Circuit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump(None))
    }
}

fn collect_vars(e: &Expr, out: &mut Vec<VarKey>) {
    match e {
        Expr::Var(v) => out.push(*v),
        Expr::Add(a, b) | Expr::Mul(a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
    }
}

/// Incremental circuit construction.
#[derive(Default)]
pub struct CircuitBuilder {
    gates: Vec<Gate>,
    wires: Vec<Vec<usize>>,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, owner: Party, var: VarKey) -> usize {
        self.push(Gate::Input { owner, var }, vec![])
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(Gate::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        self.push(Gate::Mul, vec![a, b])
    }

    pub fn local(&mut self, owner: Party, expr: Expr) -> usize {
        self.push(Gate::Local { owner, expr }, vec![])
    }

    /// Balanced sum of the given gates.
    pub fn sum(&mut self, xs: &[usize]) -> usize {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut layer = xs.to_vec();
        while layer.len() > 1 {
            layer = layer
                .chunks(2)
                .map(|c| if c.len() == 2 { self.add(c[0], c[1]) } else { c[0] })
                .collect();
        }
        layer[0]
    }

    fn push(&mut self, g: Gate, w: Vec<usize>) -> usize {
        self.gates.push(g);
        self.wires.push(w);
        self.gates.len() - 1
    }

    pub fn finish(self) -> Result<Circuit, CircuitError> {
        Circuit::new(self.gates, self.wires)
    }
}

/// Evaluates the circuit in the clear.
pub fn eval_plaintext(c: &Circuit, vars: &HashMap<VarKey, f64>) -> Result<f64, CircuitError> {
    let mut vals = Vec::with_capacity(c.len());
    for (g, w) in c.gates.iter().zip(&c.wires) {
        let v = match g {
            Gate::Input { var, .. } => *vars.get(var).ok_or(CircuitError::MissingVariable(*var))?,
            Gate::Local { expr, .. } => expr.eval(vars)?,
            Gate::Add => vals[w[0]] + vals[w[1]],
            Gate::Mul => vals[w[0]] * vals[w[1]],
        };
        vals.push(v);
    }
    Ok(vals[c.output()])
}

/// Folds every maximal single-party subcircuit into `Local` gates.
///
/// A gate becomes local when all its inputs are local to the same party.
/// Local gates whose consumers are all local are then dropped, since their
/// value is already inlined in the consumers' expressions.
pub fn local_compute(c: &Circuit) -> Circuit {
    let n = c.len();
    let mut gates = c.gates.clone();
    for i in 0..n {
        let w = &c.wires[i];
        if w.is_empty() {
            continue;
        }
        let (a, b) = (w[0], w[1]);
        let (oa, ob) = (gates[a].owner(), gates[b].owner());
        if let (Some(pa), Some(pb)) = (oa, ob) {
            if pa == pb {
                let ea = as_expr(&gates[a]);
                let eb = as_expr(&gates[b]);
                let expr = match gates[i] {
                    Gate::Add => Expr::add(ea, eb),
                    _ => Expr::mul(ea, eb),
                };
                gates[i] = Gate::Local { owner: pa, expr };
            }
        }
    }
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, w) in c.wires.iter().enumerate() {
        for &j in w {
            consumers[j].push(i);
        }
    }
    let mut keep = vec![true; n];
    for i in 0..n - 1 {
        if gates[i].owner().is_some()
            && !consumers[i].is_empty()
            && consumers[i].iter().all(|&p| gates[p].owner().is_some())
        {
            keep[i] = false;
        }
    }
    let mut remap = vec![usize::MAX; n];
    let mut new_gates = Vec::new();
    let mut new_wires = Vec::new();
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        remap[i] = new_gates.len();
        let w = if gates[i].owner().is_some() { vec![] } else { c.wires[i].iter().map(|&j| remap[j]).collect() };
        new_gates.push(gates[i].clone());
        new_wires.push(w);
    }
    Circuit::new(new_gates, new_wires).expect("local_compute preserves circuit validity")
}

fn as_expr(g: &Gate) -> Expr {
    match g {
        Gate::Input { var, .. } => Expr::Var(*var),
        Gate::Local { expr, .. } => expr.clone(),
        _ => unreachable!("only owned gates convert to expressions"),
    }
}

/// Fixed-point level of every gate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelMap(Vec<u32>);

impl LevelMap {
    pub fn level(&self, gate: usize) -> u32 {
        self.0[gate]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn max(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(1)
    }
}

/// Inputs are level 1 and local expressions sit at their degree, so a party
/// rounds only its raw inputs; addition takes the maximum, multiplication the sum.
pub fn compute_levels(c: &Circuit) -> LevelMap {
    let mut levels: Vec<u32> = Vec::with_capacity(c.len());
    for (g, w) in c.gates.iter().zip(&c.wires) {
        let l = match g {
            Gate::Input { .. } => 1,
            Gate::Local { expr, .. } => expr.degree(),
            Gate::Add => levels[w[0]].max(levels[w[1]]),
            Gate::Mul => levels[w[0]] + levels[w[1]],
        };
        levels.push(l);
    }
    LevelMap(levels)
}

/// Variables owned by `party`.
pub fn variables_of(c: &Circuit, party: Party) -> HashSet<VarKey> {
    let mut out = HashSet::new();
    for g in &c.gates {
        match g {
            Gate::Input { owner, var } if *owner == party => {
                out.insert(*var);
            }
            Gate::Local { owner, expr } if *owner == party => {
                let mut v = Vec::new();
                collect_vars(expr, &mut v);
                out.extend(v);
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use Party::*;

    fn vars(pairs: &[(VarKey, f64)]) -> HashMap<VarKey, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn plaintext_examples() {
        let mut b = CircuitBuilder::new();
        let x = b.input(KeyHolder, 0);
        let y = b.input(Evaluator, 1);
        let s = b.add(x, y);
        let c = b.finish().unwrap();
        assert_eq!(eval_plaintext(&c, &vars(&[(0, 2.0), (1, 3.0)])).unwrap(), 5.0);
        assert_eq!(s, 2);

        let mut b = CircuitBuilder::new();
        let x = b.input(KeyHolder, 0);
        let y = b.input(Evaluator, 1);
        let z = b.input(Evaluator, 2);
        let s = b.add(x, y);
        b.mul(s, z);
        let c = b.finish().unwrap();
        assert_eq!(eval_plaintext(&c, &vars(&[(0, 1.0), (1, 2.0), (2, 4.0)])).unwrap(), 12.0);
        assert_eq!(compute_levels(&c).as_slice(), &[1, 1, 1, 1, 2]);
    }

    #[test]
    fn validation_errors() {
        assert_eq!(Circuit::new(vec![], vec![]), Err(CircuitError::Empty));
        let g = vec![Gate::Input { owner: KeyHolder, var: 0 }, Gate::Add];
        assert!(matches!(
            Circuit::new(g.clone(), vec![vec![], vec![0]]),
            Err(CircuitError::Arity { gate: 1, .. })
        ));
        assert!(matches!(
            Circuit::new(g, vec![vec![], vec![0, 1]]),
            Err(CircuitError::NotTopological { gate: 1, input: 1 })
        ));
        let g = vec![Gate::Input { owner: KeyHolder, var: 0 }, Gate::Input { owner: Evaluator, var: 1 }];
        assert_eq!(Circuit::new(g, vec![vec![], vec![]]), Err(CircuitError::DanglingGate(0)));
        let mut b = CircuitBuilder::new();
        let x = b.input(KeyHolder, 0);
        let y = b.input(Evaluator, 0);
        b.add(x, y);
        assert_eq!(b.finish(), Err(CircuitError::SharedVariable(0)));
    }

    #[test]
    fn local_compute_examples() {
        // (x1 + x2) * y1 with x owned by the key holder.
        let mut b = CircuitBuilder::new();
        let x1 = b.input(KeyHolder, 0);
        let x2 = b.input(KeyHolder, 1);
        let y1 = b.input(Evaluator, 2);
        let s = b.add(x1, x2);
        b.mul(s, y1);
        let c = local_compute(&b.finish().unwrap());
        assert_eq!(c.len(), 3);
        assert_eq!(
            c.gates()[1],
            Gate::Local { owner: KeyHolder, expr: Expr::add(Expr::Var(0), Expr::Var(1)) }
        );
        assert_eq!(c.gates()[2], Gate::Mul);

        // Entirely one-party circuit collapses to a single gate.
        let mut b = CircuitBuilder::new();
        let x1 = b.input(Evaluator, 0);
        let x2 = b.input(Evaluator, 1);
        let p = b.mul(x1, x2);
        b.add(p, x1);
        let c = local_compute(&b.finish().unwrap());
        assert_eq!(c.len(), 1);
        assert_eq!(compute_levels(&c).as_slice(), &[2]);
    }

    #[test]
    fn local_gate_with_mixed_consumers_is_kept() {
        // x0 feeds both a local product and a cross-party product.
        let mut b = CircuitBuilder::new();
        let x0 = b.input(KeyHolder, 0);
        let x1 = b.input(KeyHolder, 1);
        let y = b.input(Evaluator, 2);
        let p = b.mul(x0, x1);
        let q = b.mul(x0, y);
        b.add(p, q);
        let before = b.finish().unwrap();
        let after = local_compute(&before);
        let vals = vars(&[(0, 1.5), (1, -2.0), (2, 0.25)]);
        assert_eq!(eval_plaintext(&before, &vals).unwrap(), eval_plaintext(&after, &vals).unwrap());
        assert!(after.gates().iter().any(|g| matches!(g, Gate::Input { var: 0, .. })));
        assert!(!after.gates().iter().any(|g| matches!(g, Gate::Input { var: 1, .. })));
    }

    #[test]
    fn dump_shows_levels() {
        let mut b = CircuitBuilder::new();
        let x = b.input(KeyHolder, 0);
        let y = b.input(Evaluator, 1);
        b.mul(x, y);
        let c = b.finish().unwrap();
        let d = c.dump(Some(&compute_levels(&c)));
        assert!(d.contains("g2: mul g0 g1 [level 2]"));
    }

    #[test]
    fn balanced_sum() {
        let mut b = CircuitBuilder::new();
        let xs: Vec<usize> = (0..5).map(|i| b.input(Evaluator, i)).collect();
        b.sum(&xs);
        let c = b.finish().unwrap();
        let vals: HashMap<VarKey, f64> = (0..5).map(|i| (i, i as f64)).collect();
        assert_eq!(eval_plaintext(&c, &vals).unwrap(), 10.0);
    }
}
