//! Word-pair label grid: encoding mentions into cells and decoding them back.
//!
//! Cell `(i, j)` with `i < j` may carry `Nnw` ("token `j` follows token `i`
//! inside an entity"). Cell `(tail, head)` with `tail >= head` may carry a
//! `Thw*` label marking an entity from `head` to `tail`. Decoding walks NNW
//! paths from each head to its tail.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Category, Mention, Sentence, Span};

/// Upper bound on decoded paths for one THW cell.
pub const MAX_PATHS_PER_CELL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GridLabel {
    None = 0,
    Nnw = 1,
    ThwKey = 2,
    ThwNormal = 3,
}

impl GridLabel {
    pub const ALL: [GridLabel; 4] = [
        GridLabel::None,
        GridLabel::Nnw,
        GridLabel::ThwKey,
        GridLabel::ThwNormal,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> GridLabel {
        Self::ALL[i]
    }

    pub fn thw(category: Category) -> GridLabel {
        match category {
            Category::KeyFinding => GridLabel::ThwKey,
            Category::NormalFinding => GridLabel::ThwNormal,
        }
    }

    pub fn category(self) -> Option<Category> {
        match self {
            GridLabel::ThwKey => Some(Category::KeyFinding),
            GridLabel::ThwNormal => Some(Category::NormalFinding),
            _ => None,
        }
    }

    /// Whether this label may legally sit at `(i, j)`.
    pub fn legal_at(self, i: usize, j: usize) -> bool {
        match self {
            GridLabel::None => true,
            GridLabel::Nnw => i < j,
            GridLabel::ThwKey | GridLabel::ThwNormal => i >= j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPairGrid {
    n: usize,
    labels: Vec<GridLabel>,
}

impl WordPairGrid {
    pub fn new(n: usize) -> Self {
        WordPairGrid {
            n,
            labels: vec![GridLabel::None; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> GridLabel {
        self.labels[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, label: GridLabel) {
        self.labels[i * self.n + j] = label;
    }

    /// Row-major labels.
    pub fn labels(&self) -> &[GridLabel] {
        &self.labels
    }

    /// Resets every label that is illegal at its cell to `None`.
    pub fn repair(&mut self) {
        for i in 0..self.n {
            for j in 0..self.n {
                if !self.get(i, j).legal_at(i, j) {
                    self.set(i, j, GridLabel::None);
                }
            }
        }
    }

    pub fn is_all_none(&self) -> bool {
        self.labels.iter().all(|l| *l == GridLabel::None)
    }
}

/// Token indices covered by `m` within `sentence`, in order.
pub fn token_indices(sentence: &Sentence, m: &Mention) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for frag in m.fragments() {
        let (Some(first), Some(last)) = (
            sentence.token_starting_at(frag.start),
            sentence.token_ending_at(frag.end),
        ) else {
            return Err(Error::Alignment(format!(
                "fragment {frag} is not aligned to token boundaries of the sentence at {}",
                sentence.start
            )));
        };
        if last < first {
            return Err(Error::Alignment(format!("fragment {frag} is inverted")));
        }
        out.extend(first..=last);
    }
    Ok(out)
}

/// Grid targets for `mentions` over `sentence`. Later mentions only fill
/// `None` cells; two different THW labels on one cell is an alignment error.
pub fn encode_entities(sentence: &Sentence, mentions: &[Mention]) -> Result<WordPairGrid> {
    let mut grid = WordPairGrid::new(sentence.len());
    for m in mentions {
        let idx = token_indices(sentence, m)?;
        for pair in idx.windows(2) {
            if grid.get(pair[0], pair[1]) == GridLabel::None {
                grid.set(pair[0], pair[1], GridLabel::Nnw);
            }
        }
        let (head, tail) = (idx[0], idx[idx.len() - 1]);
        let label = GridLabel::thw(m.category);
        match grid.get(tail, head) {
            GridLabel::None => grid.set(tail, head, label),
            existing if existing == label => {}
            existing => {
                return Err(Error::Alignment(format!(
                    "conflicting labels {existing:?} and {label:?} at cell ({tail}, {head}) for {}",
                    m.fragments_string()
                )))
            }
        }
    }
    Ok(grid)
}

/// Fragments from a strictly increasing token path: maximal runs of
/// consecutive indices become one char span.
pub fn path_fragments(sentence: &Sentence, path: &[usize]) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::new();
    let mut prev: Option<usize> = None;
    for &i in path {
        let tok = &sentence.tokens[i];
        match (prev, out.last_mut()) {
            (Some(p), Some(last)) if p + 1 == i => last.end = tok.end,
            _ => out.push(tok.span()),
        }
        prev = Some(i);
    }
    out
}

/// Enumerates NNW paths `head -> ... -> tail` (strictly increasing),
/// stopping after `cap` paths.
pub fn nnw_paths(
    grid: &WordPairGrid,
    head: usize,
    tail: usize,
    cap: usize,
) -> (Vec<Vec<usize>>, bool) {
    let mut paths = Vec::new();
    let mut truncated = false;
    let mut stack = vec![head];
    fn walk(
        grid: &WordPairGrid,
        tail: usize,
        cap: usize,
        stack: &mut Vec<usize>,
        paths: &mut Vec<Vec<usize>>,
        truncated: &mut bool,
    ) {
        let cur = *stack.last().expect("non-empty");
        if cur == tail {
            if paths.len() < cap {
                paths.push(stack.clone());
            } else {
                *truncated = true;
            }
            return;
        }
        for next in cur + 1..=tail {
            if *truncated {
                return;
            }
            if grid.get(cur, next) == GridLabel::Nnw {
                stack.push(next);
                walk(grid, tail, cap, stack, paths, truncated);
                stack.pop();
            }
        }
    }
    walk(grid, tail, cap, &mut stack, &mut paths, &mut truncated);
    (paths, truncated)
}

/// All mentions encoded in `grid`, deduplicated and sorted by fragments.
pub fn decode_grid(grid: &WordPairGrid, sentence: &Sentence) -> Vec<Mention> {
    assert_eq!(grid.len(), sentence.len(), "grid and sentence sizes differ");
    let mut found: BTreeSet<(Vec<Span>, Category)> = BTreeSet::new();
    for tail in 0..grid.len() {
        for head in 0..=tail {
            let Some(category) = grid.get(tail, head).category() else {
                continue;
            };
            let (paths, truncated) = nnw_paths(grid, head, tail, MAX_PATHS_PER_CELL);
            if truncated {
                log::warn!(
                    "more than {MAX_PATHS_PER_CELL} NNW paths for THW cell ({tail}, {head}); extra paths dropped"
                );
            }
            for path in paths {
                found.insert((path_fragments(sentence, &path), category));
            }
        }
    }
    let mut out: Vec<Mention> = Vec::with_capacity(found.len());
    for (frags, category) in found {
        let m = Mention::new(frags, category, None).expect("token paths yield disjoint fragments");
        // Equal fragments under two categories keep the first (KEY sorts first).
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(text: &str) -> Sentence {
        Sentence::from_text(text)
    }

    fn mention(s: &Sentence, toks: &[usize], cat: Category) -> Mention {
        Mention::new(path_fragments(s, toks), cat, None).unwrap()
    }

    #[test]
    fn encode_discontinuous_intro_example() {
        let s = sentence("long fingers and toes");
        let m = mention(&s, &[0, 3], Category::KeyFinding);
        assert_eq!(m.fragments(), &[Span::new(0, 4), Span::new(17, 21)]);
        let g = encode_entities(&s, &[m.clone()]).unwrap();
        assert_eq!(g.get(0, 3), GridLabel::Nnw);
        assert_eq!(g.get(3, 0), GridLabel::ThwKey);
        let others = g.labels().iter().filter(|l| **l != GridLabel::None).count();
        assert_eq!(others, 2);
        assert_eq!(decode_grid(&g, &s), vec![m]);
    }

    #[test]
    fn single_token_and_empty() {
        let s = sentence("macrocephaly noted");
        let m = mention(&s, &[0], Category::KeyFinding);
        let g = encode_entities(&s, &[m.clone()]).unwrap();
        assert_eq!(g.get(0, 0), GridLabel::ThwKey);
        assert!(!g.labels().contains(&GridLabel::Nnw));
        assert_eq!(decode_grid(&g, &s), vec![m]);
        assert!(encode_entities(&s, &[]).unwrap().is_all_none());
    }

    #[test]
    fn continuous_chain() {
        let s = sentence("very long fingers");
        let mut g = WordPairGrid::new(3);
        g.set(0, 1, GridLabel::Nnw);
        g.set(1, 2, GridLabel::Nnw);
        g.set(2, 0, GridLabel::ThwKey);
        let out = decode_grid(&g, &s);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].fragments(), &[Span::new(0, 17)]);
    }

    #[test]
    fn shared_head_yields_two_mentions() {
        let s = sentence("long fingers toes");
        let mut g = WordPairGrid::new(3);
        g.set(0, 1, GridLabel::Nnw);
        g.set(0, 2, GridLabel::Nnw);
        g.set(1, 0, GridLabel::ThwKey);
        g.set(2, 0, GridLabel::ThwKey);
        let out = decode_grid(&g, &s);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], mention(&s, &[0, 2], Category::KeyFinding));
        assert_eq!(out[1], mention(&s, &[0, 1], Category::KeyFinding));
    }

    #[test]
    fn thw_without_path_yields_nothing() {
        let s = sentence("a b c");
        let mut g = WordPairGrid::new(3);
        g.set(2, 0, GridLabel::ThwKey);
        assert!(decode_grid(&g, &s).is_empty());
    }

    #[test]
    fn misaligned_fragment_is_rejected() {
        let s = sentence("long fingers");
        let m = Mention::new(vec![Span::new(0, 3)], Category::KeyFinding, None).unwrap();
        assert!(matches!(
            encode_entities(&s, &[m]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn conflicting_thw_is_rejected() {
        let s = sentence("normal lips");
        let a = mention(&s, &[0, 1], Category::KeyFinding);
        let b = mention(&s, &[0, 1], Category::NormalFinding);
        assert!(matches!(
            encode_entities(&s, &[a, b]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn path_cap_bounds_output() {
        let text = (0..10)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let s = sentence(&text);
        let mut g = WordPairGrid::new(10);
        for i in 0..10 {
            for j in i + 1..10 {
                g.set(i, j, GridLabel::Nnw);
            }
        }
        g.set(9, 0, GridLabel::ThwKey);
        assert_eq!(decode_grid(&g, &s).len(), MAX_PATHS_PER_CELL);
    }

    #[test]
    fn repair_clears_illegal_cells() {
        let mut g = WordPairGrid::new(2);
        g.set(1, 0, GridLabel::Nnw);
        g.set(0, 1, GridLabel::ThwKey);
        g.set(0, 0, GridLabel::ThwNormal);
        g.repair();
        assert_eq!(g.get(1, 0), GridLabel::None);
        assert_eq!(g.get(0, 1), GridLabel::None);
        assert_eq!(g.get(0, 0), GridLabel::ThwNormal);
    }
}
