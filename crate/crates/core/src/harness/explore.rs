//! Exhaustive interleaving search over a step-level model of the
//! enter/leave/persist protocol.
//!
//! Each client step is one shared-memory access (counter increment, flag
//! read, counter decrement); the persister clears the flag, polls the
//! counter, and sets the flag again. The search fails if any reachable state
//! has the persister in its critical section while a client observes or
//! commits.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Increment the counter, then check the flag.
    Correct,
    /// Check the flag, then increment: the broken ordering.
    CheckFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Client {
    Running,
    /// Correct variant: counter incremented, flag not yet read.
    Counted,
    /// Correct variant: flag read as false; must undo the increment.
    Refused,
    /// Mutant: flag read as true, counter not yet incremented.
    Checked,
    Observing,
    Committing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Persister {
    Accepting,
    Waiting,
    Persisting,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ModelState {
    accepting: bool,
    counter: u8,
    clients: Vec<Client>,
    persister: Persister,
}

impl ModelState {
    fn violates(&self) -> bool {
        self.persister == Persister::Persisting
            && self.clients.iter().any(|c| matches!(c, Client::Observing | Client::Committing))
    }

    fn successors(&self, variant: Variant) -> Vec<(String, ModelState)> {
        let mut out = Vec::new();
        for (i, c) in self.clients.iter().enumerate() {
            let mut next = self.clone();
            let label = match (variant, c) {
                (Variant::Correct, Client::Running) => {
                    next.counter += 1;
                    next.clients[i] = Client::Counted;
                    "increments counter"
                }
                (Variant::Correct, Client::Counted) => {
                    next.clients[i] = if self.accepting { Client::Observing } else { Client::Refused };
                    if self.accepting {
                        "reads accepting=true, enters"
                    } else {
                        "reads accepting=false"
                    }
                }
                (Variant::Correct, Client::Refused) => {
                    next.counter -= 1;
                    next.clients[i] = Client::Running;
                    "decrements counter, retries"
                }
                (Variant::CheckFirst, Client::Running) => {
                    if !self.accepting {
                        continue;
                    }
                    next.clients[i] = Client::Checked;
                    "reads accepting=true"
                }
                (Variant::CheckFirst, Client::Checked) => {
                    next.counter += 1;
                    next.clients[i] = Client::Observing;
                    "increments counter, enters"
                }
                (_, Client::Observing) => {
                    let mut commit = self.clone();
                    commit.clients[i] = Client::Committing;
                    out.push((format!("client {i} starts commit"), commit));
                    next.counter -= 1;
                    next.clients[i] = Client::Running;
                    "leaves"
                }
                (_, Client::Committing) => {
                    next.counter -= 1;
                    next.clients[i] = Client::Running;
                    "finishes commit, leaves"
                }
                _ => continue,
            };
            out.push((format!("client {i} {label}"), next));
        }
        let mut next = self.clone();
        let label = match self.persister {
            Persister::Accepting => {
                next.accepting = false;
                next.persister = Persister::Waiting;
                Some("persister clears accepting")
            }
            Persister::Waiting if self.counter == 0 => {
                next.persister = Persister::Persisting;
                Some("persister reads counter=0, persists")
            }
            Persister::Waiting => None,
            Persister::Persisting => {
                next.accepting = true;
                next.persister = Persister::Accepting;
                Some("persister sets accepting")
            }
        };
        if let Some(l) = label {
            out.push((l.to_string(), next));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExploreReport {
    pub variant: Variant,
    pub clients: usize,
    pub depth: usize,
    pub states: usize,
    pub transitions: u64,
    /// Steps leading to the first violating state found.
    pub counterexample: Option<Vec<String>>,
    /// The state budget ran out before the search finished.
    pub truncated: bool,
    pub elapsed: Duration,
}

impl ExploreReport {
    pub fn pass(&self) -> bool {
        self.counterexample.is_none() && !self.truncated
    }
}

/// Breadth-first search over every interleaving of up to `depth` steps, so a
/// reported counterexample is a shortest one. `max_states` bounds the
/// distinct states kept; exceeding it yields a truncated (partial) report.
pub fn explore_protocol(clients: usize, depth: usize, variant: Variant, max_states: usize) -> ExploreReport {
    let start = Instant::now();
    let init = ModelState {
        accepting: true,
        counter: 0,
        clients: vec![Client::Running; clients],
        persister: Persister::Accepting,
    };
    let mut report = ExploreReport {
        variant,
        clients,
        depth,
        states: 0,
        transitions: 0,
        counterexample: None,
        truncated: false,
        elapsed: Duration::ZERO,
    };
    // state -> (parent index, step label); index order is discovery order
    let mut nodes: Vec<(ModelState, Option<(usize, String)>)> = vec![(init.clone(), None)];
    let mut index: HashMap<ModelState, usize> = HashMap::from([(init, 0)]);
    let mut frontier = vec![0usize];
    let mut violation = None;
    'levels: for _ in 0..depth {
        let mut next_frontier = Vec::new();
        for &n in &frontier {
            for (label, next) in nodes[n].0.successors(variant) {
                report.transitions += 1;
                if index.contains_key(&next) {
                    continue;
                }
                if index.len() >= max_states {
                    report.truncated = true;
                    break 'levels;
                }
                let id = nodes.len();
                index.insert(next.clone(), id);
                let bad = next.violates();
                nodes.push((next, Some((n, label))));
                if bad {
                    violation = Some(id);
                    break 'levels;
                }
                next_frontier.push(id);
            }
        }
        if next_frontier.is_empty() {
            break;
        }
        frontier = next_frontier;
    }
    if let Some(mut id) = violation {
        let mut trace = Vec::new();
        while let Some((parent, label)) = &nodes[id].1 {
            trace.push(label.clone());
            id = *parent;
        }
        trace.reverse();
        report.counterexample = Some(trace);
    }
    report.states = nodes.len();
    report.elapsed = start.elapsed();
    report
}
