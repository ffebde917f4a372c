//! Generative arc-standard transition system.
//!
//! The stack holds subtree roots, bottom to top, with node 0 standing for
//! `ROOT`. Words are 1-based. `GEN` pushes the next word, `LEFT_ARC` makes the
//! top node the head of the node below it, and `RIGHT_ARC` makes the node
//! below the top the head of the top.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

/// One arc-standard transition. The derived order (`Gen < LeftArc < RightArc`)
/// is the tie-break order used when ranking action sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "LEFT_ARC")]
    LeftArc,
    #[serde(rename = "RIGHT_ARC")]
    RightArc,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Gen, Action::LeftArc, Action::RightArc];

    pub fn index(self) -> usize {
        match self {
            Action::Gen => 0,
            Action::LeftArc => 1,
            Action::RightArc => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    pub fn code(self) -> char {
        match self {
            Action::Gen => 'G',
            Action::LeftArc => 'L',
            Action::RightArc => 'R',
        }
    }

    pub fn from_code(code: char) -> Option<Action> {
        match code {
            'G' => Some(Action::Gen),
            'L' => Some(Action::LeftArc),
            'R' => Some(Action::RightArc),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Gen => "GEN",
            Action::LeftArc => "LEFT_ARC",
            Action::RightArc => "RIGHT_ARC",
        })
    }
}

/// Small bit set over the three actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ActionSet(u8);

impl ActionSet {
    pub const EMPTY: ActionSet = ActionSet(0);
    pub const FULL: ActionSet = ActionSet(0b111);

    pub fn insert(&mut self, action: Action) {
        self.0 |= 1 << action.index();
    }

    pub fn contains(self, action: Action) -> bool {
        self.0 & (1 << action.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Action> + Clone {
        Action::ALL.into_iter().filter(move |a| self.contains(*a))
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        let mut set = ActionSet::EMPTY;
        for a in iter {
            set.insert(a);
        }
        set
    }
}

/// Incremental parse state: stack of subtree roots, next word to generate and
/// the arcs built so far.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParseState {
    stack: Vec<NodeId>,
    next_word: usize,
    n_words: usize,
    heads: Vec<Option<NodeId>>,
}

impl ParseState {
    pub fn initial(n_words: usize) -> Result<ParseState> {
        if n_words == 0 {
            return Err(Error::InvalidInput(
                "a parse state needs at least one word".into(),
            ));
        }
        Ok(ParseState {
            stack: vec![ROOT],
            next_word: 1,
            n_words,
            heads: vec![None; n_words],
        })
    }

    pub fn stack(&self) -> &[NodeId] {
        &self.stack
    }

    pub fn next_word(&self) -> usize {
        self.next_word
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    /// Number of words generated so far.
    pub fn generated(&self) -> usize {
        self.next_word - 1
    }

    pub fn all_generated(&self) -> bool {
        self.next_word > self.n_words
    }

    /// Top of the stack.
    pub fn s1(&self) -> NodeId {
        self.stack[self.stack.len() - 1]
    }

    /// Second node from the top, if any.
    pub fn s2(&self) -> Option<NodeId> {
        self.stack.len().checked_sub(2).map(|i| self.stack[i])
    }

    pub fn head_of(&self, word: NodeId) -> Option<NodeId> {
        self.heads.get(word.wrapping_sub(1)).copied().flatten()
    }

    /// Arcs as `(head, dependent)` pairs, ordered by dependent.
    pub fn arcs(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.heads
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.map(|h| (h, i + 1)))
    }

    pub fn is_terminal(&self) -> bool {
        self.stack.len() == 1 && self.all_generated()
    }

    pub fn valid_actions(&self) -> ActionSet {
        let mut set = ActionSet::EMPTY;
        if !self.all_generated() {
            set.insert(Action::Gen);
        }
        if self.stack.len() >= 3 {
            set.insert(Action::LeftArc);
            set.insert(Action::RightArc);
        } else if self.stack.len() == 2 && self.all_generated() {
            set.insert(Action::RightArc);
        }
        set
    }

    pub fn apply(&self, action: Action) -> Result<ParseState> {
        let mut next = self.clone();
        next.apply_mut(action).map_err(|_| Error::InvalidAction {
            action,
            index: 0,
            state: self.summary(),
        })?;
        Ok(next)
    }

    pub(crate) fn apply_mut(&mut self, action: Action) -> std::result::Result<(), ()> {
        if !self.valid_actions().contains(action) {
            return Err(());
        }
        match action {
            Action::Gen => {
                self.stack.push(self.next_word);
                self.next_word += 1;
            }
            Action::LeftArc => {
                let s1 = self.stack.pop().unwrap();
                let s2 = self.stack.pop().unwrap();
                self.heads[s2 - 1] = Some(s1);
                self.stack.push(s1);
            }
            Action::RightArc => {
                let s1 = self.stack.pop().unwrap();
                let s2 = *self.stack.last().unwrap();
                self.heads[s1 - 1] = Some(s2);
            }
        }
        Ok(())
    }

    /// Replays `actions` from the initial state over `n_words` words.
    pub fn replay(n_words: usize, actions: &[Action]) -> Result<ParseState> {
        let mut state = ParseState::initial(n_words)?;
        for (index, &action) in actions.iter().enumerate() {
            // apply_mut leaves the state untouched on failure.
            if state.apply_mut(action).is_err() {
                return Err(Error::InvalidAction {
                    action,
                    index,
                    state: state.summary(),
                });
            }
        }
        Ok(state)
    }

    /// Compact human-readable description used in error messages.
    pub fn summary(&self) -> String {
        format!(
            "stack={:?} next_word={} n_words={}",
            self.stack, self.next_word, self.n_words
        )
    }
}

/// An action sequence over a sentence of known length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionSequence {
    n_words: usize,
    actions: Vec<Action>,
}

impl ActionSequence {
    pub fn new(n_words: usize, actions: Vec<Action>) -> ActionSequence {
        ActionSequence { n_words, actions }
    }

    /// Parses a `G`/`L`/`R` code string.
    pub fn from_codes(n_words: usize, codes: &str) -> Result<ActionSequence> {
        Ok(ActionSequence::new(n_words, parse_codes(codes)?))
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn codes(&self) -> String {
        codes(&self.actions)
    }

    pub fn is_terminal(&self) -> bool {
        ParseState::replay(self.n_words, &self.actions)
            .map(|s| s.is_terminal())
            .unwrap_or(false)
    }
}

impl fmt::Display for ActionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.codes())
    }
}

pub fn codes(actions: &[Action]) -> String {
    actions.iter().map(|a| a.code()).collect()
}

pub fn parse_codes(codes: &str) -> Result<Vec<Action>> {
    codes
        .chars()
        .map(|c| {
            Action::from_code(c)
                .ok_or_else(|| Error::InvalidInput(format!("unknown action code `{c}`")))
        })
        .collect()
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Action> {
        match s {
            "G" | "GEN" => Ok(Action::Gen),
            "L" | "LEFT_ARC" | "LEFT-ARC" => Ok(Action::LeftArc),
            "R" | "RIGHT_ARC" | "RIGHT-ARC" => Ok(Action::RightArc),
            _ => Err(Error::InvalidInput(format!("unknown action `{s}`"))),
        }
    }
}

/// Unlabeled dependency tree over `n` words. `heads[i]` is the head of word
/// `i + 1`; 0 denotes ROOT. Construction enforces a single root and acyclicity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTree", into = "RawTree")]
pub struct DependencyTree {
    heads: Vec<NodeId>,
    words: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawTree {
    heads: Vec<NodeId>,
    words: Vec<String>,
}

impl TryFrom<RawTree> for DependencyTree {
    type Error = Error;

    fn try_from(raw: RawTree) -> Result<DependencyTree> {
        DependencyTree::new(raw.heads, raw.words)
    }
}

impl From<DependencyTree> for RawTree {
    fn from(tree: DependencyTree) -> RawTree {
        RawTree {
            heads: tree.heads,
            words: tree.words,
        }
    }
}

impl DependencyTree {
    pub fn new(heads: Vec<NodeId>, words: Vec<String>) -> Result<DependencyTree> {
        let n = heads.len();
        if n == 0 {
            return Err(Error::InvalidTree("empty tree".into()));
        }
        if words.len() != n {
            return Err(Error::InvalidTree(format!(
                "{} words but {} heads",
                words.len(),
                n
            )));
        }
        if let Some((i, h)) = heads.iter().enumerate().find(|(i, &h)| h > n || h == i + 1) {
            return Err(Error::InvalidTree(format!(
                "word {} has invalid head {}",
                i + 1,
                h
            )));
        }
        let roots = heads.iter().filter(|&&h| h == ROOT).count();
        if roots != 1 {
            return Err(Error::InvalidTree(format!(
                "expected exactly one root dependent, found {roots}"
            )));
        }
        // Every word must reach ROOT within n steps.
        for start in 1..=n {
            let mut node = start;
            let mut steps = 0;
            while node != ROOT {
                node = heads[node - 1];
                steps += 1;
                if steps > n {
                    return Err(Error::InvalidTree(format!(
                        "cycle through word {start}"
                    )));
                }
            }
        }
        Ok(DependencyTree { heads, words })
    }

    /// Tree with placeholder word forms `w1 … wn`.
    pub fn from_heads(heads: Vec<NodeId>) -> Result<DependencyTree> {
        let words = (1..=heads.len()).map(|i| format!("w{i}")).collect();
        DependencyTree::new(heads, words)
    }

    pub fn n_words(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[NodeId] {
        &self.heads
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn head(&self, word: NodeId) -> NodeId {
        self.heads[word - 1]
    }

    /// Arcs as `(head, dependent)` pairs, including the ROOT arc.
    pub fn arcs(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.heads.iter().enumerate().map(|(i, &h)| (h, i + 1))
    }

    /// Undirected word-word edges `(min, max)`, excluding the ROOT arc.
    pub fn undirected_edges(&self) -> Vec<(NodeId, NodeId)> {
        self.arcs()
            .filter(|&(h, _)| h != ROOT)
            .map(|(h, d)| (h.min(d), h.max(d)))
            .collect()
    }

    /// Returns a pair of crossing arcs if there is one.
    pub fn crossing_arcs(&self) -> Option<((NodeId, NodeId), (NodeId, NodeId))> {
        let arcs: Vec<_> = self.arcs().collect();
        for (i, &a) in arcs.iter().enumerate() {
            let (l1, r1) = (a.0.min(a.1), a.0.max(a.1));
            for &b in &arcs[i + 1..] {
                let (l2, r2) = (b.0.min(b.1), b.0.max(b.1));
                if (l1 < l2 && l2 < r1 && r1 < r2) || (l2 < l1 && l1 < r2 && r2 < r1) {
                    return Some((a, b));
                }
            }
        }
        None
    }

    pub fn is_projective(&self) -> bool {
        self.crossing_arcs().is_none()
    }

    fn check_word(&self, word: NodeId) -> Result<()> {
        if word == 0 || word > self.n_words() {
            return Err(Error::InvalidInput(format!(
                "word id {word} out of range 1..={}",
                self.n_words()
            )));
        }
        Ok(())
    }

    /// Number of edges from ROOT to `word`.
    pub fn depth(&self, word: NodeId) -> Result<usize> {
        self.check_word(word)?;
        let mut depth = 0;
        let mut node = word;
        while node != ROOT {
            node = self.heads[node - 1];
            depth += 1;
        }
        Ok(depth)
    }

    pub fn depths(&self) -> Vec<usize> {
        (1..=self.n_words())
            .map(|w| self.depth(w).expect("word in range"))
            .collect()
    }

    /// Path length between two words in the undirected tree.
    pub fn distance(&self, i: NodeId, j: NodeId) -> Result<usize> {
        self.check_word(i)?;
        self.check_word(j)?;
        Ok(self.bfs_from(i)[j])
    }

    /// `n × n` matrix of word-word tree distances (0-based rows and columns).
    pub fn distance_matrix(&self) -> Vec<Vec<usize>> {
        (1..=self.n_words())
            .map(|i| self.bfs_from(i)[1..].to_vec())
            .collect()
    }

    fn bfs_from(&self, start: NodeId) -> Vec<usize> {
        let n = self.n_words();
        let mut adjacency = vec![Vec::new(); n + 1];
        for (h, d) in self.arcs() {
            adjacency[h].push(d);
            adjacency[d].push(h);
        }
        let mut dist = vec![usize::MAX; n + 1];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Next action of the canonical eager oracle, or `None` when the state
/// cannot be continued toward `tree`.
pub fn oracle_step(state: &ParseState, tree: &DependencyTree) -> Option<Action> {
    let complete = |node: NodeId| {
        tree.arcs()
            .filter(|&(h, _)| h == node)
            .all(|(_, d)| state.head_of(d).is_some())
    };
    if let Some(s2) = state.s2() {
        let s1 = state.s1();
        let valid = state.valid_actions();
        if valid.contains(Action::LeftArc) && s2 != ROOT && tree.head(s2) == s1 && complete(s2) {
            return Some(Action::LeftArc);
        }
        if valid.contains(Action::RightArc) && tree.head(s1) == s2 && complete(s1) {
            return Some(Action::RightArc);
        }
    }
    if !state.all_generated() {
        return Some(Action::Gen);
    }
    None
}

/// Canonical arc-standard trajectory for a projective tree.
pub fn oracle(tree: &DependencyTree) -> Result<ActionSequence> {
    if let Some((a, b)) = tree.crossing_arcs() {
        return Err(Error::NonProjective { a, b });
    }
    let mut state = ParseState::initial(tree.n_words())?;
    let mut actions = Vec::with_capacity(2 * tree.n_words());
    while !state.is_terminal() {
        let action = oracle_step(&state, tree).ok_or_else(|| Error::Incomplete {
            len: actions.len(),
            state: state.summary(),
        })?;
        state
            .apply_mut(action)
            .expect("oracle only proposes valid actions");
        actions.push(action);
    }
    Ok(ActionSequence::new(tree.n_words(), actions))
}

/// Runs a terminal action sequence and reads the tree off the arc set.
pub fn execute(sequence: &ActionSequence) -> Result<DependencyTree> {
    let state = ParseState::replay(sequence.n_words(), sequence.actions())?;
    if !state.is_terminal() {
        return Err(Error::Incomplete {
            len: sequence.len(),
            state: state.summary(),
        });
    }
    let heads = state
        .heads
        .iter()
        .map(|h| h.expect("terminal state attaches every word"))
        .collect();
    DependencyTree::from_heads(heads)
}

/// Visits every terminal action sequence over `n_words` words in
/// lexicographic order.
pub fn for_each_terminal_sequence(n_words: usize, mut visit: impl FnMut(&[Action])) -> Result<()> {
    fn walk(state: &ParseState, prefix: &mut Vec<Action>, visit: &mut dyn FnMut(&[Action])) {
        if state.is_terminal() {
            visit(prefix);
            return;
        }
        for action in state.valid_actions().iter() {
            let mut next = state.clone();
            next.apply_mut(action).expect("valid action");
            prefix.push(action);
            walk(&next, prefix, visit);
            prefix.pop();
        }
    }
    let state = ParseState::initial(n_words)?;
    walk(&state, &mut Vec::new(), &mut visit);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    use Action::{Gen as G, LeftArc as L, RightArc as R};

    fn dog_tree() -> DependencyTree {
        let words = ["the", "dog", "bit", "the", "vet"]
            .iter()
            .map(|w| w.to_string())
            .collect();
        DependencyTree::new(vec![2, 3, 0, 5, 3], words).unwrap()
    }

    fn state(stack: &[NodeId], next_word: usize, n_words: usize) -> ParseState {
        ParseState {
            stack: stack.to_vec(),
            next_word,
            n_words,
            heads: vec![None; n_words],
        }
    }

    #[test]
    fn initial_state() {
        let s = ParseState::initial(5).unwrap();
        assert_eq!(s.stack(), &[ROOT]);
        assert_eq!(s.next_word(), 1);
        assert_eq!(s.arcs().count(), 0);
        assert_eq!(ParseState::initial(1).unwrap().stack(), &[ROOT]);
        assert!(ParseState::initial(0).is_err());
    }

    #[test]
    fn valid_action_sets() {
        let s = ParseState::initial(3).unwrap();
        assert_eq!(s.valid_actions(), [G].into_iter().collect());
        let s = state(&[0, 1, 2], 3, 2);
        assert_eq!(s.valid_actions(), [L, R].into_iter().collect());
        let s = state(&[0, 1], 2, 1);
        assert_eq!(s.valid_actions(), [R].into_iter().collect());
        // ROOT never becomes a dependent, and ROOT takes no dependent early.
        let s = state(&[0, 1], 2, 3);
        assert_eq!(s.valid_actions(), [G].into_iter().collect());
    }

    #[test]
    fn apply_rules() {
        let s = ParseState::initial(3).unwrap().apply(G).unwrap();
        assert_eq!(s.stack(), &[0, 1]);
        assert_eq!(s.next_word(), 2);

        let s = state(&[0, 1, 2], 3, 3).apply(L).unwrap();
        assert_eq!(s.stack(), &[0, 2]);
        assert_eq!(s.arcs().collect::<Vec<_>>(), vec![(2, 1)]);

        let s = state(&[0, 3], 4, 3).apply(R).unwrap();
        assert_eq!(s.stack(), &[0]);
        assert_eq!(s.arcs().collect::<Vec<_>>(), vec![(0, 3)]);
    }

    #[test]
    fn apply_is_pure_and_rejects_invalid() {
        let s = state(&[0, 1, 2], 3, 3);
        let a = s.apply(R).unwrap();
        let b = s.apply(R).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.stack(), &[0, 1, 2]);
        let err = ParseState::initial(2).unwrap().apply(L).unwrap_err();
        assert!(err.to_string().contains("LEFT_ARC"), "{err}");
    }

    #[test]
    fn oracle_on_dog_sentence() {
        let seq = oracle(&dog_tree()).unwrap();
        assert_eq!(seq.actions(), &[G, G, L, G, L, G, G, L, R, R]);
        assert_eq!(execute(&seq).unwrap().heads(), dog_tree().heads());
    }

    #[test]
    fn single_word() {
        let tree = DependencyTree::from_heads(vec![0]).unwrap();
        let seq = oracle(&tree).unwrap();
        assert_eq!(seq.actions(), &[G, R]);
        assert_eq!(execute(&seq).unwrap().heads(), &[0]);
    }

    #[test]
    fn execute_errors() {
        let seq = ActionSequence::new(3, vec![G, G, L]);
        assert!(matches!(execute(&seq), Err(Error::Incomplete { .. })));
        let seq = ActionSequence::new(2, vec![G, L]);
        assert!(matches!(
            execute(&seq),
            Err(Error::InvalidAction { index: 1, .. })
        ));
    }

    #[test]
    fn projectivity() {
        assert!(DependencyTree::from_heads(vec![2, 0]).unwrap().is_projective());
        assert!(DependencyTree::from_heads(vec![2, 0, 2, 3]).unwrap().is_projective());
        // Word 1 attaching over the root word crosses the ROOT arc.
        assert!(!DependencyTree::from_heads(vec![3, 0, 2, 2]).unwrap().is_projective());
        // Arc 4→2 crosses arc 3→1.
        let tree = DependencyTree::from_heads(vec![3, 4, 0, 3]).unwrap();
        assert!(!tree.is_projective());
        assert!(matches!(oracle(&tree), Err(Error::NonProjective { .. })));
    }

    #[test]
    fn distances_and_depths() {
        let tree = dog_tree();
        assert_eq!(tree.distance(1, 1).unwrap(), 0);
        assert_eq!(tree.distance(1, 5).unwrap(), 3);
        assert_eq!(tree.distance(5, 1).unwrap(), 3);
        assert_eq!(tree.depth(3).unwrap(), 1);
        assert_eq!(tree.depth(5).unwrap(), 2);
        assert!(tree.depth(6).is_err());
        assert!(tree.distance(0, 2).is_err());
    }

    #[test]
    fn tree_validation() {
        assert!(DependencyTree::from_heads(vec![0, 0]).is_err());
        assert!(DependencyTree::from_heads(vec![2, 1, 0]).is_err());
        assert!(DependencyTree::from_heads(vec![1]).is_err());
        assert!(DependencyTree::from_heads(vec![]).is_err());
    }

    #[test]
    fn terminal_sequence_counts() {
        // Catalan(n - 1) * 2^(n - 1) terminal sequences.
        for (n, expected) in [(1, 1), (2, 2), (3, 8), (4, 40), (5, 224)] {
            let mut count = 0;
            for_each_terminal_sequence(n, |_| count += 1).unwrap();
            assert_eq!(count, expected, "n = {n}");
        }
    }

    #[test]
    fn codes_round_trip() {
        let seq = ActionSequence::from_codes(5, "GGLGLGGLRR").unwrap();
        assert_eq!(seq.codes(), "GGLGLGGLRR");
        assert!(seq.is_terminal());
        assert!(ActionSequence::from_codes(1, "GX").is_err());
    }
}
