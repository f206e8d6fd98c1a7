use rand::Rng;

use super::SelectionDiagram;
use crate::error::{Error, Result};

/// Largest joint state space enumerated exactly.
pub const MAX_JOINT_STATES: u128 = 1_000_000;

const ROW_SUM_TOL: f64 = 1e-12;

/// Finite SCM given by one conditional probability table per node.
///
/// Nodes are added in topological order, so the model is acyclic by
/// construction. The CPT of a node has one row per parent configuration
/// (first parent most significant) and one column per state.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    names: Vec<String>,
    card: Vec<usize>,
    parents: Vec<Vec<usize>>,
    cpt: Vec<Vec<Vec<f64>>>,
}

impl Default for DiscreteScm {
    fn default() -> Self {
        Self::new()
    }
}

impl DiscreteScm {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            card: Vec::new(),
            parents: Vec::new(),
            cpt: Vec::new(),
        }
    }

    pub fn add_node(
        &mut self,
        name: &str,
        card: usize,
        parents: &[&str],
        cpt: Vec<Vec<f64>>,
    ) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidData(format!("node `{name}` defined twice")));
        }
        if card == 0 {
            return Err(Error::InvalidData(format!(
                "node `{name}` has an empty domain"
            )));
        }
        let pids = parents
            .iter()
            .map(|p| self.id(p))
            .collect::<Result<Vec<_>>>()?;
        let rows: usize = pids.iter().map(|&p| self.card[p]).product();
        if cpt.len() != rows {
            return Err(Error::InvalidData(format!(
                "node `{name}` needs {rows} CPT rows, got {}",
                cpt.len()
            )));
        }
        for row in &cpt {
            let sum: f64 = row.iter().sum();
            if row.len() != card
                || row.iter().any(|p| !(p.is_finite() && *p >= 0.0))
                || (sum - 1.0).abs() > ROW_SUM_TOL
            {
                return Err(Error::InvalidData(format!(
                    "node `{name}`: CPT row is not a distribution"
                )));
            }
        }
        self.names.push(name.to_string());
        self.card.push(card);
        self.parents.push(pids);
        self.cpt.push(cpt);
        Ok(())
    }

    /// Random CPTs (entries bounded away from 0) over the structure of `g`;
    /// every node gets `card` states.
    pub fn random_for<R: Rng + ?Sized>(
        g: &SelectionDiagram,
        card: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut scm = Self::new();
        for v in g.topological_order()? {
            let parents: Vec<&str> = g.parents_of(v).iter().map(|&p| g.name(p)).collect();
            let rows = card.pow(parents.len() as u32);
            let cpt = (0..rows)
                .map(|_| {
                    let raw: Vec<f64> = (0..card).map(|_| rng.random_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    raw.iter().map(|r| r / total).collect()
                })
                .collect();
            scm.add_node(g.name(v), card, &parents, cpt)?;
        }
        Ok(scm)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn card(&self, id: usize) -> usize {
        self.card[id]
    }

    /// The model after do(`name` = `value`): the node loses its parents and
    /// becomes a point mass.
    pub fn intervene(&self, name: &str, value: usize) -> Result<Self> {
        let v = self.id(name)?;
        if value >= self.card[v] {
            return Err(Error::InvalidData(format!(
                "value {value} outside the domain of `{name}`"
            )));
        }
        let mut out = self.clone();
        out.parents[v].clear();
        let mut row = vec![0.0; self.card[v]];
        row[value] = 1.0;
        out.cpt[v] = vec![row];
        Ok(out)
    }

    /// Full joint distribution by enumeration.
    pub fn joint(&self) -> Result<JointTable> {
        let states = self
            .card
            .iter()
            .try_fold(1u128, |acc, &c| acc.checked_mul(c as u128))
            .unwrap_or(u128::MAX);
        if states > MAX_JOINT_STATES {
            return Err(Error::DomainTooLarge(states));
        }
        let table = JointTable::new(self.card.clone());
        let mut p = vec![0.0; states as usize];
        let mut state = vec![0usize; self.card.len()];
        for (k, slot) in p.iter_mut().enumerate() {
            table.decode(k, &mut state);
            *slot = (0..self.card.len())
                .map(|v| {
                    let row = self.parents[v]
                        .iter()
                        .fold(0, |acc, &q| acc * self.card[q] + state[q]);
                    self.cpt[v][row][state[v]]
                })
                .product();
        }
        Ok(JointTable { p, ..table })
    }
}

/// Joint probability table over the nodes of a [`DiscreteScm`]; node values
/// are the state indices 0, 1, ….
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    card: Vec<usize>,
    p: Vec<f64>,
}

impl JointTable {
    fn new(card: Vec<usize>) -> Self {
        Self {
            card,
            p: Vec::new(),
        }
    }

    fn decode(&self, mut k: usize, state: &mut [usize]) {
        for v in (0..self.card.len()).rev() {
            state[v] = k % self.card[v];
            k /= self.card[v];
        }
    }

    fn states(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        let mut state = vec![0; self.card.len()];
        self.p.iter().enumerate().map(move |(k, &p)| {
            self.decode(k, &mut state);
            (state.clone(), p)
        })
    }

    /// P(node_i = value_i for every pair in `event`).
    pub fn prob(&self, event: &[(usize, usize)]) -> f64 {
        self.states()
            .filter(|(s, _)| event.iter().all(|&(v, x)| s[v] == x))
            .map(|(_, p)| p)
            .sum()
    }

    /// E[node | given].
    pub fn expectation(&self, node: usize, given: &[(usize, usize)]) -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (s, p) in self.states() {
            if given.iter().all(|&(v, x)| s[v] == x) {
                num += p * s[node] as f64;
                den += p;
            }
        }
        if den <= 0.0 {
            return Err(Error::InvalidData(
                "conditioning event has probability zero".into(),
            ));
        }
        Ok(num / den)
    }

    /// Marginal over `vars`, indexed in mixed radix (first var most
    /// significant).
    pub fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let size: usize = vars.iter().map(|&v| self.card[v]).product();
        let mut out = vec![0.0; size];
        for (s, p) in self.states() {
            out[vars.iter().fold(0, |acc, &v| acc * self.card[v] + s[v])] += p;
        }
        out
    }

    /// Σ |P(a,b,z) P(z) − P(a,z) P(b,z)| over all configurations: zero
    /// exactly when A ⫫ B | Z. Sets must be disjoint.
    pub fn independence_gap(&self, a: &[usize], b: &[usize], z: &[usize]) -> f64 {
        let size = |vars: &[usize]| -> usize { vars.iter().map(|&v| self.card[v]).product() };
        let (na, nb, nz) = (size(a), size(b), size(z));
        let abz = self.marginal(&[a, b, z].concat());
        let az = self.marginal(&[a, z].concat());
        let bz = self.marginal(&[b, z].concat());
        let pz = self.marginal(z);
        let mut gap = 0.0;
        for ia in 0..na {
            for ib in 0..nb {
                for iz in 0..nz {
                    let joint = abz[(ia * nb + ib) * nz + iz];
                    gap += (joint * pz[iz] - az[ia * nz + iz] * bz[ib * nz + iz]).abs();
                }
            }
        }
        gap
    }
}

/// E[`query`] in `scm`, optionally under do(node = value).
pub fn eval_discrete_scm(
    scm: &DiscreteScm,
    intervention: Option<(&str, usize)>,
    query: &str,
) -> Result<f64> {
    let model = match intervention {
        Some((node, value)) => scm.intervene(node, value)?,
        None => scm.clone(),
    };
    let q = model.id(query)?;
    model.joint()?.expectation(q, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::tests::random_dag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bern(p: f64) -> Vec<f64> {
        vec![1.0 - p, p]
    }

    #[test]
    fn null_effect() {
        let mut scm = DiscreteScm::new();
        scm.add_node("Z", 2, &[], vec![bern(0.3)]).unwrap();
        scm.add_node("A", 2, &["Z"], vec![bern(0.2), bern(0.7)])
            .unwrap();
        scm.add_node("Y", 2, &["Z"], vec![bern(0.4), bern(0.9)])
            .unwrap();
        let y1 = eval_discrete_scm(&scm, Some(("A", 1)), "Y").unwrap();
        let y0 = eval_discrete_scm(&scm, Some(("A", 0)), "Y").unwrap();
        assert!((y1 - y0).abs() < 1e-15);
    }

    #[test]
    fn do_matches_hand_adjustment() {
        // Z → A, Z → Y, A → Y with CPT rows indexed by (Z, A).
        let mut scm = DiscreteScm::new();
        scm.add_node("Z", 2, &[], vec![bern(0.3)]).unwrap();
        scm.add_node("A", 2, &["Z"], vec![bern(0.2), bern(0.7)])
            .unwrap();
        scm.add_node(
            "Y",
            2,
            &["Z", "A"],
            vec![bern(0.1), bern(0.5), bern(0.4), bern(0.8)],
        )
        .unwrap();
        // Σ_z P(Y=1|A=1,z) P(z) = 0.5·0.7 + 0.8·0.3
        let truth1 = 0.5 * 0.7 + 0.8 * 0.3;
        let truth0 = 0.1 * 0.7 + 0.4 * 0.3;
        assert!((eval_discrete_scm(&scm, Some(("A", 1)), "Y").unwrap() - truth1).abs() < 1e-15);
        assert!((eval_discrete_scm(&scm, Some(("A", 0)), "Y").unwrap() - truth0).abs() < 1e-15);
        // The naive contrast differs because Z confounds.
        let j = scm.joint().unwrap();
        let naive = j.expectation(2, &[(1, 1)]).unwrap();
        assert!((naive - truth1).abs() > 1e-3);
    }

    #[test]
    fn bad_tables_rejected() {
        let mut scm = DiscreteScm::new();
        assert!(scm.add_node("A", 2, &[], vec![vec![0.5, 0.6]]).is_err());
        assert!(scm.add_node("A", 2, &["Q"], vec![bern(0.5)]).is_err());
        scm.add_node("A", 2, &[], vec![bern(0.5)]).unwrap();
        assert!(scm.add_node("B", 2, &["A"], vec![bern(0.5)]).is_err());
        assert!(scm.intervene("A", 2).is_err());
    }

    #[test]
    fn domain_too_large() {
        let mut scm = DiscreteScm::new();
        for i in 0..7 {
            scm.add_node(&format!("V{i}"), 10, &[], vec![vec![0.1; 10]])
                .unwrap();
        }
        assert_eq!(scm.joint(), Err(Error::DomainTooLarge(10_000_000)));
    }

    #[test]
    fn joint_sums_to_one_and_intervention_is_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_dag(&mut rng, 5, 0.5);
        let scm = DiscreteScm::random_for(&g, 3, &mut rng).unwrap();
        let j = scm.joint().unwrap();
        assert!((j.prob(&[]) - 1.0).abs() < 1e-12);
        let v = scm.id("V2").unwrap();
        let jd = scm.intervene("V2", 1).unwrap().joint().unwrap();
        assert!((jd.prob(&[(v, 1)]) - 1.0).abs() < 1e-12);
    }

    /// d-separation against exact conditional independence on random
    /// discrete models; models with near-violations of faithfulness are
    /// redrawn.
    #[test]
    fn d_separation_matches_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut accepted = 0;
        let mut drawn = 0;
        while accepted < 200 {
            drawn += 1;
            let g = random_dag(&mut rng, 5, 0.5);
            let card = rng.random_range(2..=3);
            let scm = DiscreteScm::random_for(&g, card, &mut rng).unwrap();
            let joint = scm.joint().unwrap();
            // Index by scm order through names.
            let map: Vec<usize> = (0..5).map(|v| scm.id(g.name(v)).unwrap()).collect();
            let mut checks = Vec::new();
            let mut ambiguous = false;
            for a in 0..5 {
                for b in a + 1..5 {
                    for mask in 0..32u32 {
                        if mask & (1 << a) != 0 || mask & (1 << b) != 0 {
                            continue;
                        }
                        let z: Vec<usize> = (0..5).filter(|i| mask & (1 << i) != 0).collect();
                        let zs: Vec<usize> = z.iter().map(|&v| map[v]).collect();
                        let gap = joint.independence_gap(&[map[a]], &[map[b]], &zs);
                        if (1e-10..=1e-6).contains(&gap) {
                            ambiguous = true;
                        }
                        checks.push((g.d_separated_ids(&[a], &[b], &z), gap < 1e-10));
                    }
                }
            }
            if ambiguous {
                continue;
            }
            accepted += 1;
            for (dsep, indep) in checks {
                assert_eq!(dsep, indep);
            }
        }
        assert!(drawn < 220, "too many unfaithful draws: {drawn}");
    }
}
