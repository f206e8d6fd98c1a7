use std::fmt;

use serde::Serialize;

use super::{DiscreteScm, SelectionDiagram, Subsets};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransportStatus {
    Transportable,
    PostTreatmentTransportable,
    NotTransportable,
}

impl TransportStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            TransportStatus::Transportable => 0,
            TransportStatus::PostTreatmentTransportable => 1,
            TransportStatus::NotTransportable => 2,
        }
    }
}

impl fmt::Display for TransportStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TransportStatus::Transportable => "Transportable",
            TransportStatus::PostTreatmentTransportable => "PostTreatmentTransportable",
            TransportStatus::NotTransportable => "NotTransportable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransportVerdict {
    pub status: TransportStatus,
    /// Present on transportable statuses only.
    pub formula: Option<String>,
    /// The adjustment set, sorted by name.
    pub set: Vec<String>,
    /// Active path from the selection node to the outcome when not
    /// transportable.
    pub witness: Option<String>,
    pub treatment: String,
    pub outcome: String,
    pub selection: String,
}

impl fmt::Display for TransportVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.formula, &self.witness) {
            (Some(formula), _) => write!(f, "{}: {}", self.status, formula),
            (None, Some(w)) => write!(f, "{}, witness: {}", self.status, w),
            (None, None) => write!(f, "{}", self.status),
        }
    }
}

impl TransportVerdict {
    /// Evaluates the emitted formula on a discrete model whose node names
    /// match the diagram. The selection node takes 1 in the trial
    /// population and 0 in the target population; returns the target
    /// E[outcome | do(treatment = a)].
    pub fn evaluate(&self, scm: &DiscreteScm, a: usize) -> Result<f64> {
        if self.status == TransportStatus::NotTransportable {
            return Err(Error::Unsupported("effect is not transportable".into()));
        }
        let (s, t, y) = (
            scm.id(&self.selection)?,
            scm.id(&self.treatment)?,
            scm.id(&self.outcome)?,
        );
        let xs = self
            .set
            .iter()
            .map(|n| scm.id(n))
            .collect::<Result<Vec<_>>>()?;
        let observed = scm.joint()?;
        let trial = scm.intervene(&self.treatment, a)?.joint()?;
        let configs: usize = xs.iter().map(|&v| scm.card(v)).product();
        let mut total = 0.0;
        for k in 0..configs {
            let mut rest = k;
            let mut event: Vec<(usize, usize)> = vec![(0, 0); xs.len()];
            for (slot, &v) in event.iter_mut().zip(&xs).rev() {
                *slot = (v, rest % scm.card(v));
                rest /= scm.card(v);
            }
            let mut target_event = event.clone();
            target_event.push((s, 0));
            let weight = if self.status == TransportStatus::PostTreatmentTransportable {
                observed.prob(&[target_event.as_slice(), &[(t, a)]].concat())
                    / observed.prob(&[(s, 0), (t, a)])
            } else {
                observed.prob(&target_event) / observed.prob(&[(s, 0)])
            };
            if weight == 0.0 {
                continue;
            }
            let mut trial_event = event;
            trial_event.push((s, 1));
            total += trial.expectation(y, &trial_event)? * weight;
        }
        Ok(total)
    }
}

fn roles(
    d: &SelectionDiagram,
    set_x: &[&str],
    a: &str,
    y: &str,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    let s = d.selection.ok_or(Error::NoSelectionNode)?;
    let (ia, iy) = (d.id(a)?, d.id(y)?);
    let xs = set_x.iter().map(|n| d.id(n)).collect::<Result<Vec<_>>>()?;
    if ia == iy || xs.iter().any(|&v| v == s || v == ia || v == iy) {
        return Err(Error::InvalidData(
            "adjustment set must exclude selection, treatment and outcome".into(),
        ));
    }
    if let Some(&v) = xs.iter().find(|&&v| d.is_latent(v)) {
        return Err(Error::InvalidData(format!(
            "`{}` is latent and cannot be adjusted for",
            d.name(v)
        )));
    }
    Ok((s, ia, iy, xs))
}

/// S-admissibility of `set_x`: the selection node and `y` are d-separated
/// by `set_x` together with the treatment, once the edges into the
/// treatment are removed.
pub fn s_admissible(d: &SelectionDiagram, set_x: &[&str], a: &str, y: &str) -> Result<bool> {
    let (s, ia, iy, mut xs) = roles(d, set_x, a, y)?;
    xs.push(ia);
    Ok(d.without_incoming(ia).d_separated_ids(&[s], &[iy], &xs))
}

/// Shortest active simple path from `from` to `to` given `z`, ties broken by
/// node names.
fn witness_path(g: &SelectionDiagram, from: usize, to: usize, z: &[usize]) -> Option<Vec<usize>> {
    let mut zmask = vec![false; g.len()];
    for &v in z {
        zmask[v] = true;
    }
    let anc = g.ancestors(z);
    let neighbours = |v: usize| -> Vec<usize> {
        let mut n: Vec<usize> = g
            .parents_of(v)
            .iter()
            .chain(g.children_of(v))
            .copied()
            .collect();
        n.sort_by(|&p, &q| g.name(p).cmp(g.name(q)));
        n.dedup();
        n
    };
    for limit in 2..=g.len() {
        let mut path = vec![from];
        if let Some(p) = extend(g, &mut path, to, limit, &zmask, &anc, &neighbours) {
            return Some(p);
        }
    }
    None
}

fn extend(
    g: &SelectionDiagram,
    path: &mut Vec<usize>,
    to: usize,
    limit: usize,
    z: &[bool],
    anc: &[bool],
    neighbours: &dyn Fn(usize) -> Vec<usize>,
) -> Option<Vec<usize>> {
    let last = *path.last().expect("non-empty path");
    if last == to {
        return Some(path.clone());
    }
    if path.len() == limit {
        return None;
    }
    for next in neighbours(last) {
        if path.contains(&next) {
            continue;
        }
        path.push(next);
        let ok = path.len() < 3 || g.path_active(&path[path.len() - 3..], z, anc);
        if ok {
            if let Some(p) = extend(g, path, to, limit, z, anc, neighbours) {
                return Some(p);
            }
        }
        path.pop();
    }
    None
}

fn formula(d: &SelectionDiagram, a: usize, y: usize, s: usize, xs: &[usize], post: bool) -> String {
    let a_l = d.name(a).to_lowercase();
    let (y, s) = (d.name(y), d.name(s));
    if xs.is_empty() {
        return format!("P({y}|do({a_l})) = P({y}|do({a_l}),{s}=1)");
    }
    let x_l: Vec<String> = xs.iter().map(|&v| d.name(v).to_lowercase()).collect();
    let joined = x_l.join(",");
    let index = if xs.len() == 1 {
        format!("_{joined}")
    } else {
        format!("_{{{joined}}}")
    };
    let weight = if post {
        format!("P({joined}|{a_l})")
    } else {
        format!("P({joined})")
    };
    format!("P({y}|do({a_l})) = Σ{index} P({y}|do({a_l}),{joined},{s}=1) {weight}")
}

/// Decides whether the effect of `a` on `y` transports through `set_x` and
/// emits the matching formula, or a witness path when it does not.
pub fn transport_formula(
    d: &SelectionDiagram,
    a: &str,
    y: &str,
    set_x: &[&str],
) -> Result<TransportVerdict> {
    let (s, ia, iy, mut xs) = roles(d, set_x, a, y)?;
    xs.sort_by(|&p, &q| d.name(p).cmp(d.name(q)));
    xs.dedup();
    let cut = d.without_incoming(ia);
    let mut cond = xs.clone();
    cond.push(ia);
    let mut verdict = TransportVerdict {
        status: TransportStatus::NotTransportable,
        formula: None,
        set: xs.iter().map(|&v| d.name(v).to_string()).collect(),
        witness: None,
        treatment: d.name(ia).to_string(),
        outcome: d.name(iy).to_string(),
        selection: d.name(s).to_string(),
    };
    if !cut.d_separated_ids(&[s], &[iy], &cond) {
        let path = witness_path(&cut, s, iy, &cond).expect("d-connected nodes have an active path");
        verdict.witness = Some(cut.render_path(&path));
        return Ok(verdict);
    }
    let desc = d.descendants(&[ia]);
    let post = xs.iter().any(|&v| desc[v]);
    verdict.status = if post {
        TransportStatus::PostTreatmentTransportable
    } else {
        TransportStatus::Transportable
    };
    verdict.formula = Some(formula(d, ia, iy, s, &xs, post));
    Ok(verdict)
}

/// Searches for an adjustment set when none is given. Prefers the smallest
/// S-admissible set of non-descendants of `a`, then the smallest admissible
/// set overall; otherwise reports the witness for all pre-treatment nodes.
pub fn find_transport(
    d: &SelectionDiagram,
    a: &str,
    y: &str,
    max_size: Option<usize>,
) -> Result<TransportVerdict> {
    let s = d.selection.ok_or(Error::NoSelectionNode)?;
    let (ia, iy) = (d.id(a)?, d.id(y)?);
    let desc = d.descendants(&[ia]);
    let mut cands: Vec<usize> = (0..d.len())
        .filter(|&v| v != s && v != ia && v != iy && !d.is_latent(v))
        .collect();
    cands.sort_by(|&p, &q| d.name(p).cmp(d.name(q)));
    if cands.len() > MAX_SEARCH_NODES && max_size.is_none() {
        return Err(Error::InvalidData(format!(
            "{} candidate nodes; pass an explicit set or a size limit",
            cands.len()
        )));
    }
    let cut = d.without_incoming(ia);
    let admissible = |xs: &[usize]| {
        let mut cond = xs.to_vec();
        cond.push(ia);
        cut.d_separated_ids(&[s], &[iy], &cond)
    };
    let names = |xs: &[usize]| xs.iter().map(|&v| d.name(v)).collect::<Vec<_>>();
    let pre: Vec<usize> = cands.iter().copied().filter(|&v| !desc[v]).collect();
    for pool in [&pre, &cands] {
        let hit = Subsets::new(pool.len(), max_size)
            .map(|idx| idx.iter().map(|&i| pool[i]).collect::<Vec<_>>())
            .find(|xs| admissible(xs));
        if let Some(xs) = hit {
            return transport_formula(d, a, y, &names(&xs));
        }
    }
    transport_formula(d, a, y, &names(&pre))
}

/// Above this many candidates an unbounded search is refused.
pub const MAX_SEARCH_NODES: usize = 20;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::parse_graph_dsl;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SHIFT_ON_X: &str =
        "S -> X\nS -> A\nX -> A\nX -> Y\nA -> Y\nselection S\ntreatment A\noutcome Y";
    const SHIFT_ON_Y: &str =
        "S -> X\nS -> A\nX -> A\nX -> Y\nA -> Y\nS -> Y\nselection S\ntreatment A\noutcome Y";
    const POST: &str = "A -> X\nX -> Y\nS -> X\nselection S\ntreatment A\noutcome Y";

    #[test]
    fn canonical_diagram_verdicts() {
        let b = parse_graph_dsl(SHIFT_ON_X).unwrap();
        assert!(s_admissible(&b, &["X"], "A", "Y").unwrap());
        let v = transport_formula(&b, "A", "Y", &["X"]).unwrap();
        assert_eq!(v.status, TransportStatus::Transportable);
        assert_eq!(
            v.to_string(),
            "Transportable: P(Y|do(a)) = Σ_x P(Y|do(a),x,S=1) P(x)"
        );

        let a = parse_graph_dsl(SHIFT_ON_Y).unwrap();
        assert!(!s_admissible(&a, &["X"], "A", "Y").unwrap());
        let v = transport_formula(&a, "A", "Y", &["X"]).unwrap();
        assert_eq!(v.status, TransportStatus::NotTransportable);
        assert_eq!(v.formula, None);
        assert_eq!(v.to_string(), "NotTransportable, witness: S → Y");

        let p = parse_graph_dsl(POST).unwrap();
        assert!(s_admissible(&p, &["X"], "A", "Y").unwrap());
        let v = transport_formula(&p, "A", "Y", &["X"]).unwrap();
        assert_eq!(v.status, TransportStatus::PostTreatmentTransportable);
        assert_eq!(
            v.to_string(),
            "PostTreatmentTransportable: P(Y|do(a)) = Σ_x P(Y|do(a),x,S=1) P(x|a)"
        );
    }

    #[test]
    fn post_treatment_with_direct_effect() {
        let p = parse_graph_dsl("A -> X\nX -> Y\nA -> Y\nS -> X\nselection S").unwrap();
        assert!(s_admissible(&p, &["X"], "A", "Y").unwrap());
        assert!(!s_admissible(&p, &[], "A", "Y").unwrap());
        let v = transport_formula(&p, "A", "Y", &[]).unwrap();
        assert_eq!(v.witness.as_deref(), Some("S → X → Y"));
    }

    #[test]
    fn longer_witness_and_multi_set_formula() {
        let g = parse_graph_dsl("S -> W\nW -> Z\nZ -> Y\nA -> Y\nW -> A\nselection S").unwrap();
        let v = transport_formula(&g, "A", "Y", &[]).unwrap();
        assert_eq!(v.witness.as_deref(), Some("S → W → Z → Y"));
        let v = transport_formula(&g, "A", "Y", &["Z", "W"]).unwrap();
        assert_eq!(
            v.formula.as_deref(),
            Some("P(Y|do(a)) = Σ_{w,z} P(Y|do(a),w,z,S=1) P(w,z)")
        );
        let v = transport_formula(
            &parse_graph_dsl("A -> Y\nS -> A\nselection S").unwrap(),
            "A",
            "Y",
            &[],
        )
        .unwrap();
        assert_eq!(v.formula.as_deref(), Some("P(Y|do(a)) = P(Y|do(a),S=1)"));
    }

    #[test]
    fn requires_selection_node_and_observed_set() {
        let g = parse_graph_dsl("X -> A\nA -> Y").unwrap();
        assert_eq!(
            s_admissible(&g, &["X"], "A", "Y"),
            Err(Error::NoSelectionNode)
        );
        let g = parse_graph_dsl("S -> U\nU -> Y\nA -> Y\nlatent U\nselection S").unwrap();
        assert!(transport_formula(&g, "A", "Y", &["U"]).is_err());
        assert!(matches!(
            transport_formula(&g, "A", "Q", &[]),
            Err(Error::UnknownNode(_))
        ));
    }

    #[test]
    fn mutilation_idempotent_for_s_admissibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut g = crate::scm::tests::random_dag(&mut rng, 6, 0.4);
            g.set_selection("V0").unwrap();
            let a = format!("V{}", rng.random_range(1..6));
            let y = if a == "V5" { "V4" } else { "V5" };
            let cut = g.without_incoming(g.id(&a).unwrap());
            let others: Vec<String> = (1..6)
                .map(|i| format!("V{i}"))
                .filter(|n| *n != a && n != y)
                .collect();
            for mask in 0..(1u32 << others.len()) {
                let set: Vec<&str> = others
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| mask & (1 << k) != 0)
                    .map(|(_, n)| n.as_str())
                    .collect();
                assert_eq!(
                    s_admissible(&g, &set, &a, y).unwrap(),
                    s_admissible(&cut, &set, &a, y).unwrap()
                );
            }
        }
    }

    #[test]
    fn formula_matches_interventional_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for shape in [SHIFT_ON_X, POST] {
            let d = parse_graph_dsl(shape).unwrap();
            let v = transport_formula(&d, "A", "Y", &["X"]).unwrap();
            for _ in 0..50 {
                let card = rng.random_range(2..=3);
                let scm = DiscreteScm::random_for(&d, card, &mut rng).unwrap();
                let s = scm.id("S").unwrap();
                for a in 0..card {
                    let truth = scm.intervene("A", a).unwrap().joint().unwrap();
                    let truth = truth.expectation(scm.id("Y").unwrap(), &[(s, 0)]).unwrap();
                    assert!((v.evaluate(&scm, a).unwrap() - truth).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn not_transportable_formula_fails_numerically() {
        // With S -> Y, re-calibration through X alone misses the S → Y shift.
        let d = parse_graph_dsl(SHIFT_ON_Y).unwrap();
        let mut forced =
            transport_formula(&parse_graph_dsl(SHIFT_ON_X).unwrap(), "A", "Y", &["X"]).unwrap();
        assert!(transport_formula(&d, "A", "Y", &["X"])
            .unwrap()
            .evaluate(&DiscreteScm::new(), 0)
            .is_err());
        forced.status = TransportStatus::Transportable;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scm = DiscreteScm::random_for(&d, 2, &mut rng).unwrap();
        let truth = scm.intervene("A", 1).unwrap().joint().unwrap();
        let truth = truth
            .expectation(scm.id("Y").unwrap(), &[(scm.id("S").unwrap(), 0)])
            .unwrap();
        assert!((forced.evaluate(&scm, 1).unwrap() - truth).abs() > 1e-6);
    }

    #[test]
    fn search_prefers_smallest_pre_treatment_set() {
        let b = parse_graph_dsl(SHIFT_ON_X).unwrap();
        let v = find_transport(&b, "A", "Y", None).unwrap();
        assert_eq!(v.status, TransportStatus::Transportable);
        assert_eq!(v.set, ["X"]);

        let p = parse_graph_dsl(POST).unwrap();
        let v = find_transport(&p, "A", "Y", None).unwrap();
        assert_eq!(v.status, TransportStatus::PostTreatmentTransportable);
        assert_eq!(v.set, ["X"]);

        let a = parse_graph_dsl(SHIFT_ON_Y).unwrap();
        let v = find_transport(&a, "A", "Y", None).unwrap();
        assert_eq!(v.status, TransportStatus::NotTransportable);
        assert_eq!(v.witness.as_deref(), Some("S → Y"));
    }

    #[test]
    fn search_agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let g = crate::scm::tests::random_dag(&mut rng, 6, 0.35);
            let mut d = g.clone();
            d.add_node("S");
            let target = format!("V{}", rng.random_range(0..6));
            d.add_edge("S", &target).unwrap();
            d.set_selection("S").unwrap();
            let v = find_transport(&d, "V0", "V5", None).unwrap();
            let others: Vec<&str> = ["V1", "V2", "V3", "V4"].into();
            let any = (0..16u32).any(|mask| {
                let xs: Vec<&str> = (0..4)
                    .filter(|k| mask >> k & 1 == 1)
                    .map(|k| others[k])
                    .collect();
                s_admissible(&d, &xs, "V0", "V5").unwrap()
            });
            assert_eq!(v.status != TransportStatus::NotTransportable, any);
            if any {
                let xs: Vec<&str> = v.set.iter().map(String::as_str).collect();
                assert!(s_admissible(&d, &xs, "V0", "V5").unwrap());
            }
        }
    }
}
