//! Exact policy evaluation for validation.
//!
//! Because dynamics are piecewise constant in the disturbance, each policy
//! induces a finite Markov chain whose transition probabilities are segment
//! lengths. Infinite-horizon values solve `(I - gamma P) v = r`; finite
//! horizons use the backward recursion `v_{k+1} = r + gamma P v_k`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{CmdpModel, Policy, PolicySet};

const RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyChain {
    pub transition: DMatrix<f64>,
    pub expected_reward: DVector<f64>,
    pub expected_cost: DVector<f64>,
}

pub fn build_chain(model: &CmdpModel, policy: &Policy) -> Result<PolicyChain> {
    let table = model.table(policy)?;
    let n = model.num_states;
    let mut transition = DMatrix::zeros(n, n);
    let mut expected_reward = DVector::zeros(n);
    let mut expected_cost = DVector::zeros(n);
    for (x, row) in table.rows().iter().enumerate() {
        for seg in row.iter() {
            let p = seg.len();
            transition[(x, seg.next_state)] += p;
            expected_reward[x] += p * seg.reward;
            expected_cost[x] += p * seg.cost;
        }
    }
    Ok(PolicyChain {
        transition,
        expected_reward,
        expected_cost,
    })
}

/// Solves `(I - discount * P) v = rhs` by LU with iterative refinement.
fn solve_discounted(p: &DMatrix<f64>, rhs: &DVector<f64>, discount: f64) -> DVector<f64> {
    let n = p.nrows();
    let a = DMatrix::identity(n, n) - p * discount;
    let lu = a.clone().lu();
    let mut v = lu.solve(rhs).expect("I - discount*P is nonsingular for discount < 1");
    for _ in 0..4 {
        let residual = rhs - &a * &v;
        if residual.amax() <= RESIDUAL_TOL {
            break;
        }
        if let Some(dv) = lu.solve(&residual) {
            v += dv;
        }
    }
    v
}

fn finite_recursion(p: &DMatrix<f64>, r: &DVector<f64>, discount: f64, horizon: usize) -> DVector<f64> {
    let mut v = DVector::zeros(r.len());
    for _ in 0..horizon {
        v = r + p * &v * discount;
    }
    v
}

/// Infinite-horizon discounted reward of every state.
pub fn exact_value(chain: &PolicyChain, gamma: f64) -> DVector<f64> {
    solve_discounted(&chain.transition, &chain.expected_reward, gamma)
}

/// Infinite-horizon discounted cost of every state.
pub fn exact_cost(chain: &PolicyChain, beta: f64) -> DVector<f64> {
    solve_discounted(&chain.transition, &chain.expected_cost, beta)
}

/// Expected `horizon`-step discounted reward, the mean of a rollout sample.
pub fn exact_finite_value(chain: &PolicyChain, gamma: f64, horizon: usize) -> DVector<f64> {
    finite_recursion(&chain.transition, &chain.expected_reward, gamma, horizon)
}

pub fn exact_finite_cost(chain: &PolicyChain, beta: f64, horizon: usize) -> DVector<f64> {
    finite_recursion(&chain.transition, &chain.expected_cost, beta, horizon)
}

/// Indices `i` with `costs[i] <= k + epsilon`.
pub fn exact_feasible_set(costs: &[f64], k: f64, epsilon: f64) -> Vec<usize> {
    costs
        .iter()
        .enumerate()
        .filter(|(_, &c)| c <= k + epsilon)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeasibleOptimum {
    /// Every maximizer of the value over the 0-feasible set.
    Optimal { policies: Vec<usize>, value: f64 },
    /// No policy satisfies the constraint.
    Infeasible,
}

impl FeasibleOptimum {
    pub fn policies(&self) -> &[usize] {
        match self {
            FeasibleOptimum::Optimal { policies, .. } => policies,
            FeasibleOptimum::Infeasible => &[],
        }
    }
}

pub fn feasible_optimal(values: &[f64], costs: &[f64], k: f64) -> FeasibleOptimum {
    let feasible = exact_feasible_set(costs, k, 0.0);
    let Some(value) = feasible.iter().map(|&i| values[i]).reduce(f64::max) else {
        return FeasibleOptimum::Infeasible;
    };
    FeasibleOptimum::Optimal {
        policies: feasible.into_iter().filter(|&i| values[i] == value).collect(),
        value,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub policy: usize,
    pub value: f64,
    pub cost: f64,
    /// Aligned with `OracleReport::horizons`.
    pub value_h: Vec<f64>,
    pub cost_h: Vec<f64>,
}

/// Exact values and costs at the initial state for every policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub horizons: Vec<usize>,
    pub rows: Vec<OracleRow>,
}

impl OracleReport {
    pub fn build(model: &CmdpModel, policies: &PolicySet, horizons: &[usize]) -> Result<Self> {
        let x0 = model.initial_state;
        let rows = policies
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let chain = build_chain(model, p)?;
                Ok(OracleRow {
                    policy: i,
                    value: exact_value(&chain, model.gamma)[x0],
                    cost: exact_cost(&chain, model.beta)[x0],
                    value_h: horizons
                        .iter()
                        .map(|&h| exact_finite_value(&chain, model.gamma, h)[x0])
                        .collect(),
                    cost_h: horizons
                        .iter()
                        .map(|&h| exact_finite_cost(&chain, model.beta, h)[x0])
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            horizons: horizons.to_vec(),
            rows,
        })
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.cost).collect()
    }

    fn horizon_index(&self, h: usize) -> Result<usize> {
        self.horizons
            .iter()
            .position(|&x| x == h)
            .ok_or_else(|| Error::Precondition(format!("oracle report has no horizon {h}")))
    }

    pub fn values_at(&self, h: usize) -> Result<Vec<f64>> {
        let k = self.horizon_index(h)?;
        Ok(self.rows.iter().map(|r| r.value_h[k]).collect())
    }

    pub fn costs_at(&self, h: usize) -> Result<Vec<f64>> {
        let k = self.horizon_index(h)?;
        Ok(self.rows.iter().map(|r| r.cost_h[k]).collect())
    }

    pub fn feasible_set(&self, k: f64, epsilon: f64) -> Vec<usize> {
        exact_feasible_set(&self.costs(), k, epsilon)
    }

    pub fn feasible_optimal(&self, k: f64) -> FeasibleOptimum {
        feasible_optimal(&self.values(), &self.costs(), k)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["policy".to_string(), "value".into(), "cost".into()];
        for hz in &self.horizons {
            h.push(format!("value_h{hz}"));
            h.push(format!("cost_h{hz}"));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.policy.to_string(), r.value.to_string(), r.cost.to_string()];
            for (v, c) in r.value_h.iter().zip(&r.cost_h) {
                rec.push(v.to_string());
                rec.push(c.to_string());
            }
            out.write_record(rec)?;
        }
        out.flush().map_err(|e| Error::io("<oracle csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let bad = |msg: String| Error::Precondition(format!("malformed oracle csv: {msg}"));
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || (header.len() - 3) % 2 != 0 {
            return Err(bad("unexpected column count".into()));
        }
        let horizons = (3..header.len())
            .step_by(2)
            .map(|i| {
                header[i]
                    .strip_prefix("value_h")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("bad column {}", &header[i])))
            })
            .collect::<Result<Vec<usize>>>()?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| bad(format!("bad number {:?}", &rec[i])))
            };
            let policy = rec[0].parse().map_err(|_| bad("bad policy index".into()))?;
            let mut value_h = Vec::new();
            let mut cost_h = Vec::new();
            for i in (3..rec.len()).step_by(2) {
                value_h.push(num(i)?);
                cost_h.push(num(i + 1)?);
            }
            rows.push(OracleRow {
                policy,
                value: num(1)?,
                cost: num(2)?,
                value_h,
                cost_h,
            });
        }
        Ok(Self { horizons, rows })
    }
}
