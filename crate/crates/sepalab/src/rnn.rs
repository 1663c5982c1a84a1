//! Finite-state RNNs and the DFA toolkit behind them.
//!
//! The recurrent models here carry their hidden state as `m` registers of
//! `p` bits each and step through an explicit transition table, so a
//! hidden state serializes to exactly `m * p` bits. That count is what
//! the streaming protocol accounting measures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RnnError {
    #[error("malformed automaton: {0}")]
    Malformed(String),
    #[error("symbol {0} outside alphabet of {1}")]
    BadSymbol(usize, usize),
    #[error("serialization: {0}")]
    Serde(String),
}

/// Deterministic finite automaton with a dense transition table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dfa {
    pub alphabet: Vec<String>,
    pub start: usize,
    pub accepting: Vec<bool>,
    /// delta[state][symbol] = next state.
    pub delta: Vec<Vec<usize>>,
}

impl Dfa {
    pub fn new(
        alphabet: Vec<String>,
        start: usize,
        accepting: Vec<bool>,
        delta: Vec<Vec<usize>>,
    ) -> Result<Self, RnnError> {
        let n = delta.len();
        if n == 0 {
            return Err(RnnError::Malformed("no states".into()));
        }
        if accepting.len() != n {
            return Err(RnnError::Malformed(format!("{} accept flags for {n} states", accepting.len())));
        }
        if start >= n {
            return Err(RnnError::Malformed(format!("start state {start} outside 0..{n}")));
        }
        for (s, row) in delta.iter().enumerate() {
            if row.len() != alphabet.len() {
                return Err(RnnError::Malformed(format!(
                    "state {s} has {} transitions for {} symbols",
                    row.len(),
                    alphabet.len()
                )));
            }
            for (a, t) in row.iter().enumerate() {
                if *t >= n {
                    return Err(RnnError::Malformed(format!("delta[{s}][{a}] = {t} outside 0..{n}")));
                }
            }
        }
        Ok(Dfa { alphabet, start, accepting, delta })
    }

    pub fn states(&self) -> usize {
        self.delta.len()
    }

    pub fn step(&self, state: usize, sym: usize) -> Result<usize, RnnError> {
        if sym >= self.alphabet.len() {
            return Err(RnnError::BadSymbol(sym, self.alphabet.len()));
        }
        Ok(self.delta[state][sym])
    }

    pub fn run(&self, input: &[usize]) -> Result<usize, RnnError> {
        let mut s = self.start;
        for &a in input {
            s = self.step(s, a)?;
        }
        Ok(s)
    }

    pub fn accepts(&self, input: &[usize]) -> Result<bool, RnnError> {
        Ok(self.accepting[self.run(input)?])
    }

    /// States reachable from the start state.
    fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.states()];
        let mut stack = vec![self.start];
        seen[self.start] = true;
        while let Some(s) = stack.pop() {
            for &t in &self.delta[s] {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen
    }

    /// Hopcroft partition refinement over the reachable part. Returns an
    /// equivalent DFA with the minimum number of states.
    pub fn minimize(&self) -> Dfa {
        let reach = self.reachable();
        let live: Vec<usize> = (0..self.states()).filter(|s| reach[*s]).collect();
        let index_of: Vec<Option<usize>> = {
            let mut v = vec![None; self.states()];
            for (i, s) in live.iter().enumerate() {
                v[*s] = Some(i);
            }
            v
        };
        let n = live.len();
        let k = self.alphabet.len();
        // Inverse transitions over the reachable subautomaton.
        let mut inv: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n]; k];
        for (i, s) in live.iter().enumerate() {
            for a in 0..k {
                let t = index_of[self.delta[*s][a]].expect("reachable closure");
                inv[a][t].push(i);
            }
        }
        // Initial partition: accepting vs not.
        let mut class_of: Vec<usize> = live.iter().map(|s| usize::from(self.accepting[*s])).collect();
        let mut classes: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
        for (i, c) in class_of.iter().enumerate() {
            classes[*c].push(i);
        }
        classes.retain(|c| !c.is_empty());
        for (c, members) in classes.iter().enumerate() {
            for &m in members {
                class_of[m] = c;
            }
        }
        let mut work: Vec<(usize, usize)> = (0..classes.len()).flat_map(|c| (0..k).map(move |a| (c, a))).collect();
        while let Some((cid, a)) = work.pop() {
            let splitter: Vec<usize> = classes[cid].clone();
            let mut hit = vec![false; n];
            for &t in &splitter {
                for &s in &inv[a][t] {
                    hit[s] = true;
                }
            }
            let affected: std::collections::BTreeSet<usize> =
                hit.iter().enumerate().filter(|(_, h)| **h).map(|(s, _)| class_of[s]).collect();
            for c in affected {
                let (inside, outside): (Vec<usize>, Vec<usize>) =
                    classes[c].iter().partition(|s| hit[**s]);
                if inside.is_empty() || outside.is_empty() {
                    continue;
                }
                let new_id = classes.len();
                let (keep, moved) =
                    if inside.len() <= outside.len() { (outside, inside) } else { (inside, outside) };
                classes[c] = keep;
                for &m in &moved {
                    class_of[m] = new_id;
                }
                classes.push(moved);
                for b in 0..k {
                    work.push((new_id, b));
                }
            }
        }
        // Rebuild: class of the start state first for a stable layout.
        let mut order: Vec<usize> = (0..classes.len()).collect();
        let start_class = class_of[index_of[self.start].unwrap()];
        order.sort_by_key(|c| (*c != start_class, classes[*c].iter().map(|s| live[*s]).min()));
        let rank: Vec<usize> = {
            let mut r = vec![0; classes.len()];
            for (i, c) in order.iter().enumerate() {
                r[*c] = i;
            }
            r
        };
        let mut delta = vec![vec![0usize; k]; classes.len()];
        let mut accepting = vec![false; classes.len()];
        for (c, members) in classes.iter().enumerate() {
            let rep = members[0];
            accepting[rank[c]] = self.accepting[live[rep]];
            for a in 0..k {
                let t = index_of[self.delta[live[rep]][a]].unwrap();
                delta[rank[c]][a] = rank[class_of[t]];
            }
        }
        Dfa {
            alphabet: self.alphabet.clone(),
            start: rank[start_class],
            accepting,
            delta,
        }
    }

    pub fn to_json(&self) -> Result<String, RnnError> {
        serde_json::to_string_pretty(self).map_err(|e| RnnError::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, RnnError> {
        let dfa: Dfa = serde_json::from_str(s).map_err(|e| RnnError::Serde(e.to_string()))?;
        Dfa::new(dfa.alphabet, dfa.start, dfa.accepting, dfa.delta)
    }
}

/// Recognizer for balanced strings over two bracket types with nesting
/// depth at most two. States encode the stack contents: empty, five of
/// the six nonempty stacks, and a dead state for any violation. The two
/// depth-two stacks with the same top collapse later under minimization
/// only if their futures agree, so all seven stack states are listed.
///
/// Alphabet order: `(`, `)`, `[`, `]`.
pub fn dyck22_dfa() -> Dfa {
    // States: 0 = empty (accept), 1 = "(", 2 = "[",
    // 3 = "((", 4 = "([", 5 = "[(", 6 = "[[", 7 = dead.
    let dead = 7;
    let mut delta = vec![vec![dead; 4]; 8];
    // Push from empty.
    delta[0][0] = 1;
    delta[0][2] = 2;
    // Depth one: push or matching pop.
    delta[1][0] = 3;
    delta[1][2] = 4;
    delta[1][1] = 0;
    delta[2][0] = 5;
    delta[2][2] = 6;
    delta[2][3] = 0;
    // Depth two: matching pop only.
    delta[3][1] = 1;
    delta[4][3] = 1;
    delta[5][1] = 2;
    delta[6][3] = 2;
    let accepting = vec![true, false, false, false, false, false, false, false];
    Dfa::new(
        vec!["(".into(), ")".into(), "[".into(), "]".into()],
        0,
        accepting,
        delta,
    )
    .expect("static table is well formed")
}

/// Recurrent recognizer: an explicit DFA stepped symbol-by-symbol, hidden
/// state held as `m` registers of `p_bits` bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnModel {
    pub m: usize,
    pub p_bits: u32,
    dfa: Dfa,
}

impl RnnModel {
    /// Packs the binary-coded DFA state into the fewest `p_bits`-wide
    /// registers that hold it.
    pub fn from_dfa(dfa: Dfa, p_bits: u32) -> Result<Self, RnnError> {
        if p_bits == 0 || p_bits > 63 {
            return Err(RnnError::Malformed(format!("register width {p_bits} outside 1..=63")));
        }
        let state_bits = ceil_log2(dfa.states()).max(1);
        let m = state_bits.div_ceil(p_bits as usize);
        Ok(RnnModel { m, p_bits, dfa })
    }

    pub fn dfa(&self) -> &Dfa {
        &self.dfa
    }

    pub fn state_bits(&self) -> usize {
        self.m * self.p_bits as usize
    }

    pub fn start_state(&self) -> usize {
        self.dfa.start
    }

    pub fn step(&self, state: usize, sym: usize) -> Result<usize, RnnError> {
        self.dfa.step(state, sym)
    }

    pub fn run_from(&self, state: usize, input: &[usize]) -> Result<usize, RnnError> {
        let mut s = state;
        for &a in input {
            s = self.dfa.step(s, a)?;
        }
        Ok(s)
    }

    pub fn accepts(&self, input: &[usize]) -> Result<bool, RnnError> {
        Ok(self.dfa.accepting[self.run_from(self.dfa.start, input)?])
    }

    pub fn is_accepting(&self, state: usize) -> bool {
        self.dfa.accepting[state]
    }

    /// Hidden state as registers, little-endian bit groups of the state id.
    pub fn state_registers(&self, state: usize) -> Vec<u64> {
        let mask = if self.p_bits == 63 { (1u64 << 63) - 1 } else { (1u64 << self.p_bits) - 1 };
        (0..self.m).map(|j| ((state as u64) >> (j as u32 * self.p_bits)) & mask).collect()
    }

    /// Exact wire image of a hidden state: `m * p_bits` bits.
    pub fn state_wire_bits(&self, state: usize) -> Vec<bool> {
        let regs = self.state_registers(state);
        let mut bits = Vec::with_capacity(self.state_bits());
        for r in regs {
            for b in 0..self.p_bits {
                bits.push((r >> b) & 1 == 1);
            }
        }
        bits
    }

    pub fn state_from_wire_bits(&self, bits: &[bool]) -> Result<usize, RnnError> {
        if bits.len() != self.state_bits() {
            return Err(RnnError::Malformed(format!(
                "wire image has {} bits, expected {}",
                bits.len(),
                self.state_bits()
            )));
        }
        let mut state = 0usize;
        for (i, b) in bits.iter().enumerate() {
            if *b {
                state |= 1 << i;
            }
        }
        if state >= self.dfa.states() {
            return Err(RnnError::Malformed(format!("decoded state {state} outside table")));
        }
        Ok(state)
    }
}

pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}
