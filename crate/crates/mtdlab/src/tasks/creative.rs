//! Algorithmic creativity tasks: two *discovery* tasks where memorizing the
//! training set is a trap (sibling pairs, triangles) and two *construction*
//! tasks solved fresh per item (cycles, paths in a prompted graph).
//!
//! Discovery items are bare token tuples; the hidden world (a leaf forest or
//! a fixed graph) defines validity, and the training set covers only half of
//! the valid items, so novelty has room to exist. Construction items carry
//! their own problem instance: the prompt lists a fresh random graph's edges,
//! and the completion must be a simple cycle (or path) of the required
//! length in *that* graph. Construction training sets are empty — every
//! valid answer is novel by definition.
//!
//! Scoring follows the four-fraction scheme: validity (valid / all),
//! uniqueness (distinct / valid), novelty (novel distinct / distinct), and
//! creativity (novel distinct / all), which makes creativity the product of
//! the other three and bounds it by each.

use super::{TaskError, BEGIN_TOKEN, END_TOKEN, NODE_BASE, SEP_TOKEN};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreativeTask {
    SiblingDiscovery,
    TriangleDiscovery,
    CircleConstruction,
    LineConstruction,
}

impl CreativeTask {
    pub fn name(&self) -> &'static str {
        match self {
            CreativeTask::SiblingDiscovery => "sibling_discovery",
            CreativeTask::TriangleDiscovery => "triangle_discovery",
            CreativeTask::CircleConstruction => "circle_construction",
            CreativeTask::LineConstruction => "line_construction",
        }
    }

    pub fn is_discovery(&self) -> bool {
        matches!(
            self,
            CreativeTask::SiblingDiscovery | CreativeTask::TriangleDiscovery
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiblingParams {
    pub n_leaves: usize,
    pub n_parents: usize,
}

impl Default for SiblingParams {
    fn default() -> Self {
        Self { n_leaves: 64, n_parents: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriangleParams {
    pub n_nodes: usize,
    pub edge_p: f64,
}

impl Default for TriangleParams {
    fn default() -> Self {
        Self { n_nodes: 24, edge_p: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructionParams {
    pub n_nodes: usize,
    pub edge_p: f64,
    /// Number of nodes in the required cycle or path.
    pub target_len: usize,
}

impl Default for ConstructionParams {
    fn default() -> Self {
        Self { n_nodes: 12, edge_p: 0.3, target_len: 5 }
    }
}

/// Size parameters for all four worlds; the dispatcher picks the relevant one.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub sibling: SiblingParams,
    pub triangle: TriangleParams,
    pub circle: ConstructionParams,
    pub line: ConstructionParams,
}

/// Hidden ground truth an item is judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CreativeWorld {
    /// `parent_of[leaf]` gives each leaf's parent; a pair is valid iff the
    /// two (distinct) leaves share a parent.
    Sibling { parent_of: Vec<u16> },
    /// Fixed undirected graph; a triple is valid iff all three edges exist.
    Triangle { n_nodes: usize, edges: BTreeSet<(u16, u16)> },
    /// Per-item fresh G(n, p) graphs; the completion must be a simple cycle
    /// or path (per task) with `target_len` nodes in the prompted graph.
    Construction { params: ConstructionParams },
}

/// A creativity task instance: the world, and the half of the valid items
/// the model is allowed to have memorized (canonical core serializations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreativeSpec {
    pub task: CreativeTask,
    pub world: CreativeWorld,
    pub train_set: BTreeSet<Vec<u32>>,
}

/// The four creativity fractions, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreativityScores {
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub creativity: f64,
}

fn edge_key(a: u16, b: u16) -> (u16, u16) {
    if a <= b { (a, b) } else { (b, a) }
}

fn sample_graph<R: Rng + ?Sized>(n_nodes: usize, edge_p: f64, rng: &mut R) -> BTreeSet<(u16, u16)> {
    let mut edges = BTreeSet::new();
    for a in 0..n_nodes as u16 {
        for b in (a + 1)..n_nodes as u16 {
            if rng.random::<f64>() < edge_p {
                edges.insert((a, b));
            }
        }
    }
    edges
}

/// Randomized backtracking search for a simple path (`close = false`) or
/// simple cycle (`close = true`) visiting exactly `len` distinct nodes.
fn find_simple_walk<R: Rng + ?Sized>(
    n_nodes: usize,
    edges: &BTreeSet<(u16, u16)>,
    len: usize,
    close: bool,
    rng: &mut R,
) -> Option<Vec<u16>> {
    fn extend<R: Rng + ?Sized>(
        walk: &mut Vec<u16>,
        used: &mut Vec<bool>,
        n_nodes: usize,
        edges: &BTreeSet<(u16, u16)>,
        len: usize,
        close: bool,
        rng: &mut R,
    ) -> bool {
        if walk.len() == len {
            return !close || edges.contains(&edge_key(walk[0], *walk.last().unwrap()));
        }
        let here = *walk.last().unwrap();
        let mut next: Vec<u16> = (0..n_nodes as u16)
            .filter(|&v| !used[v as usize] && edges.contains(&edge_key(here, v)))
            .collect();
        next.shuffle(rng);
        for v in next {
            walk.push(v);
            used[v as usize] = true;
            if extend(walk, used, n_nodes, edges, len, close, rng) {
                return true;
            }
            used[v as usize] = false;
            walk.pop();
        }
        false
    }

    let mut starts: Vec<u16> = (0..n_nodes as u16).collect();
    starts.shuffle(rng);
    for s in starts {
        let mut walk = vec![s];
        let mut used = vec![false; n_nodes];
        used[s as usize] = true;
        if extend(&mut walk, &mut used, n_nodes, edges, len, close, rng) {
            return Some(walk);
        }
    }
    None
}

fn enumerate_triangles(n_nodes: usize, edges: &BTreeSet<(u16, u16)>) -> Vec<[u16; 3]> {
    let mut out = Vec::new();
    for a in 0..n_nodes as u16 {
        for b in (a + 1)..n_nodes as u16 {
            if !edges.contains(&(a, b)) {
                continue;
            }
            for c in (b + 1)..n_nodes as u16 {
                if edges.contains(&edge_key(a, c)) && edges.contains(&edge_key(b, c)) {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

/// Builds a world and carves out its training half.
pub fn make_creative_world<R: Rng + ?Sized>(
    task: CreativeTask,
    params: &WorldParams,
    rng: &mut R,
) -> Result<CreativeSpec, TaskError> {
    match task {
        CreativeTask::SiblingDiscovery => {
            let p = &params.sibling;
            if p.n_parents == 0 || p.n_leaves % p.n_parents != 0 || p.n_leaves / p.n_parents < 2 {
                return Err(TaskError::WorldGeneration {
                    what: format!(
                        "sibling world needs n_leaves divisible by n_parents with >= 2 leaves each, got {}/{}",
                        p.n_leaves, p.n_parents
                    ),
                });
            }
            let group = p.n_leaves / p.n_parents;
            let mut leaves: Vec<u16> = (0..p.n_leaves as u16).collect();
            leaves.shuffle(rng);
            let mut parent_of = vec![0u16; p.n_leaves];
            for (i, &leaf) in leaves.iter().enumerate() {
                parent_of[leaf as usize] = (i / group) as u16;
            }
            // All valid pairs, canonically serialized, then a 50% split.
            let mut valid: Vec<Vec<u32>> = Vec::new();
            for a in 0..p.n_leaves as u16 {
                for b in (a + 1)..p.n_leaves as u16 {
                    if parent_of[a as usize] == parent_of[b as usize] {
                        valid.push(vec![NODE_BASE + a as u32, NODE_BASE + b as u32]);
                    }
                }
            }
            valid.shuffle(rng);
            let train_set: BTreeSet<Vec<u32>> = valid[..valid.len() / 2].iter().cloned().collect();
            Ok(CreativeSpec {
                task,
                world: CreativeWorld::Sibling { parent_of },
                train_set,
            })
        }
        CreativeTask::TriangleDiscovery => {
            let p = &params.triangle;
            // Resample until the graph holds enough triangles for a split.
            for _ in 0..500 {
                let edges = sample_graph(p.n_nodes, p.edge_p, rng);
                let triangles = enumerate_triangles(p.n_nodes, &edges);
                if triangles.len() < 8 {
                    continue;
                }
                let mut canon: Vec<Vec<u32>> = triangles
                    .iter()
                    .map(|t| t.iter().map(|&v| NODE_BASE + v as u32).collect())
                    .collect();
                canon.shuffle(rng);
                let train_set: BTreeSet<Vec<u32>> =
                    canon[..canon.len() / 2].iter().cloned().collect();
                return Ok(CreativeSpec {
                    task,
                    world: CreativeWorld::Triangle { n_nodes: p.n_nodes, edges },
                    train_set,
                });
            }
            Err(TaskError::WorldGeneration {
                what: format!(
                    "no G({}, {}) sample with >= 8 triangles in 500 attempts",
                    p.n_nodes, p.edge_p
                ),
            })
        }
        CreativeTask::CircleConstruction | CreativeTask::LineConstruction => {
            let p = if task == CreativeTask::CircleConstruction {
                params.circle.clone()
            } else {
                params.line.clone()
            };
            let min_len = if task == CreativeTask::CircleConstruction { 3 } else { 2 };
            if p.target_len < min_len || p.target_len > p.n_nodes {
                return Err(TaskError::WorldGeneration {
                    what: format!(
                        "target_len {} out of range for {} nodes",
                        p.target_len, p.n_nodes
                    ),
                });
            }
            Ok(CreativeSpec {
                task,
                world: CreativeWorld::Construction { params: p },
                train_set: BTreeSet::new(),
            })
        }
    }
}

/// Serializes a graph as a flat edge-token list in randomized order
/// (each edge smaller-node-first).
fn edge_tokens<R: Rng + ?Sized>(edges: &BTreeSet<(u16, u16)>, rng: &mut R) -> Vec<u32> {
    let mut list: Vec<(u16, u16)> = edges.iter().copied().collect();
    list.shuffle(rng);
    let mut out = Vec::with_capacity(2 * list.len());
    for (a, b) in list {
        out.push(NODE_BASE + a as u32);
        out.push(NODE_BASE + b as u32);
    }
    out
}

/// Samples a solvable construction instance: a fresh graph that contains at
/// least one valid answer, plus one such answer.
fn sample_construction_instance<R: Rng + ?Sized>(
    params: &ConstructionParams,
    cycle: bool,
    rng: &mut R,
) -> Result<(BTreeSet<(u16, u16)>, Vec<u16>), TaskError> {
    for _ in 0..500 {
        let edges = sample_graph(params.n_nodes, params.edge_p, rng);
        if let Some(walk) = find_simple_walk(params.n_nodes, &edges, params.target_len, cycle, rng)
        {
            return Ok((edges, walk));
        }
    }
    Err(TaskError::WorldGeneration {
        what: format!(
            "no solvable G({}, {}) instance with a length-{} {} in 500 attempts",
            params.n_nodes,
            params.edge_p,
            params.target_len,
            if cycle { "cycle" } else { "path" }
        ),
    })
}

/// One training sequence for the task: discovery items are sampled from the
/// training half; construction items are fresh solvable instances with one
/// solution spelled out.
pub fn make_train_item<R: Rng + ?Sized>(
    spec: &CreativeSpec,
    rng: &mut R,
) -> Result<Vec<u32>, TaskError> {
    match (&spec.task, &spec.world) {
        (CreativeTask::SiblingDiscovery, CreativeWorld::Sibling { .. })
        | (CreativeTask::TriangleDiscovery, CreativeWorld::Triangle { .. }) => {
            let n = spec.train_set.len();
            if n == 0 {
                return Err(TaskError::WorldGeneration {
                    what: "discovery task has an empty training set".into(),
                });
            }
            let pick = rng.random_range(0..n);
            let mut core: Vec<u32> = spec.train_set.iter().nth(pick).unwrap().clone();
            core.shuffle(rng); // order within an item carries no meaning
            let mut item = Vec::with_capacity(core.len() + 2);
            item.push(BEGIN_TOKEN);
            item.extend_from_slice(&core);
            item.push(END_TOKEN);
            Ok(item)
        }
        (task, CreativeWorld::Construction { params }) => {
            let cycle = *task == CreativeTask::CircleConstruction;
            let (edges, mut walk) = sample_construction_instance(params, cycle, rng)?;
            // Present the solution in a random of its equivalent forms.
            if cycle {
                let shift = rng.random_range(0..walk.len());
                walk.rotate_left(shift);
            }
            if rng.random::<bool>() {
                walk.reverse();
            }
            let mut item = vec![BEGIN_TOKEN];
            item.extend(edge_tokens(&edges, rng));
            item.push(SEP_TOKEN);
            item.extend(walk.iter().map(|&v| NODE_BASE + v as u32));
            item.push(END_TOKEN);
            Ok(item)
        }
        (task, world) => Err(TaskError::WorldGeneration {
            what: format!("task {:?} does not match world {:?}", task, world),
        }),
    }
}

/// The prompt an item generation starts from: bare `BEGIN` for discovery,
/// `BEGIN <edge list> SEP` over a fresh solvable graph for construction.
pub fn make_eval_prompt<R: Rng + ?Sized>(
    spec: &CreativeSpec,
    rng: &mut R,
) -> Result<Vec<u32>, TaskError> {
    match &spec.world {
        CreativeWorld::Sibling { .. } | CreativeWorld::Triangle { .. } => Ok(vec![BEGIN_TOKEN]),
        CreativeWorld::Construction { params } => {
            let cycle = spec.task == CreativeTask::CircleConstruction;
            let (edges, _) = sample_construction_instance(params, cycle, rng)?;
            let mut prompt = vec![BEGIN_TOKEN];
            prompt.extend(edge_tokens(&edges, rng));
            prompt.push(SEP_TOKEN);
            Ok(prompt)
        }
    }
}

/// Vocabulary size a model needs to host this task's tokens.
pub fn required_vocab(spec: &CreativeSpec) -> u32 {
    let max_node = match &spec.world {
        CreativeWorld::Sibling { parent_of } => parent_of.len(),
        CreativeWorld::Triangle { n_nodes, .. } => *n_nodes,
        CreativeWorld::Construction { params } => params.n_nodes,
    };
    NODE_BASE + max_node as u32
}

/// Parse result of one generated item: its canonical identity, if valid.
fn canonical_if_valid(spec: &CreativeSpec, item: &[u32]) -> Option<Vec<u32>> {
    // Grammar shared by all tasks: BEGIN body END, END nowhere else.
    if item.len() < 3 || item[0] != BEGIN_TOKEN || *item.last().unwrap() != END_TOKEN {
        return None;
    }
    let body = &item[1..item.len() - 1];
    if body.contains(&BEGIN_TOKEN) || body.contains(&END_TOKEN) {
        return None;
    }
    match (&spec.task, &spec.world) {
        (CreativeTask::SiblingDiscovery, CreativeWorld::Sibling { parent_of }) => {
            let n = parent_of.len() as u32;
            let [a, b] = *body else { return None };
            if a == b || !(NODE_BASE..NODE_BASE + n).contains(&a) || !(NODE_BASE..NODE_BASE + n).contains(&b) {
                return None;
            }
            let (la, lb) = ((a - NODE_BASE) as usize, (b - NODE_BASE) as usize);
            if parent_of[la] != parent_of[lb] {
                return None;
            }
            Some(vec![a.min(b), a.max(b)])
        }
        (CreativeTask::TriangleDiscovery, CreativeWorld::Triangle { n_nodes, edges }) => {
            let n = *n_nodes as u32;
            let [a, b, c] = *body else { return None };
            let mut nodes = [a, b, c];
            nodes.sort_unstable();
            if nodes[0] == nodes[1] || nodes[1] == nodes[2] {
                return None;
            }
            if nodes.iter().any(|&v| !(NODE_BASE..NODE_BASE + n).contains(&v)) {
                return None;
            }
            let v: Vec<u16> = nodes.iter().map(|&t| (t - NODE_BASE) as u16).collect();
            let ok = edges.contains(&edge_key(v[0], v[1]))
                && edges.contains(&edge_key(v[1], v[2]))
                && edges.contains(&edge_key(v[0], v[2]));
            ok.then(|| nodes.to_vec())
        }
        (task, CreativeWorld::Construction { params }) => {
            let cycle = *task == CreativeTask::CircleConstruction;
            let n = params.n_nodes as u32;
            let sep_positions: Vec<usize> =
                body.iter().enumerate().filter(|(_, &t)| t == SEP_TOKEN).map(|(i, _)| i).collect();
            let [sep] = sep_positions[..] else { return None };
            let (edge_part, walk_part) = (&body[..sep], &body[sep + 1..]);
            if edge_part.len() % 2 != 0 {
                return None;
            }
            let in_range = |t: u32| (NODE_BASE..NODE_BASE + n).contains(&t);
            if edge_part.iter().chain(walk_part).any(|&t| !in_range(t)) {
                return None;
            }
            let edges: BTreeSet<(u16, u16)> = edge_part
                .chunks_exact(2)
                .map(|e| edge_key((e[0] - NODE_BASE) as u16, (e[1] - NODE_BASE) as u16))
                .collect();
            let walk: Vec<u16> = walk_part.iter().map(|&t| (t - NODE_BASE) as u16).collect();
            if walk.len() != params.target_len {
                return None;
            }
            let mut distinct = walk.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() != walk.len() {
                return None;
            }
            for w in walk.windows(2) {
                if !edges.contains(&edge_key(w[0], w[1])) {
                    return None;
                }
            }
            if cycle && !edges.contains(&edge_key(walk[0], *walk.last().unwrap())) {
                return None;
            }
            // Canonical identity: sorted edge list, then the walk in its
            // least rotation/reflection (cycle) or lesser direction (path).
            let mut canon: Vec<u32> = edges
                .iter()
                .flat_map(|&(a, b)| [NODE_BASE + a as u32, NODE_BASE + b as u32])
                .collect();
            canon.push(SEP_TOKEN);
            let walk_tokens: Vec<u32> = walk.iter().map(|&v| NODE_BASE + v as u32).collect();
            canon.extend(canonical_walk(&walk_tokens, cycle));
            Some(canon)
        }
        _ => None,
    }
}

/// Least-of-all-representations form of a walk: for cycles, the minimum over
/// rotations of both directions; for paths, the lesser of the two directions.
fn canonical_walk(walk: &[u32], cycle: bool) -> Vec<u32> {
    if !cycle {
        let mut rev: Vec<u32> = walk.to_vec();
        rev.reverse();
        return if rev < walk.to_vec() { rev } else { walk.to_vec() };
    }
    let mut best: Option<Vec<u32>> = None;
    for dir in [false, true] {
        let mut seq: Vec<u32> = walk.to_vec();
        if dir {
            seq.reverse();
        }
        for shift in 0..seq.len() {
            let mut rot = seq.clone();
            rot.rotate_left(shift);
            if best.as_ref().is_none_or(|b| rot < *b) {
                best = Some(rot);
            }
        }
    }
    best.unwrap()
}

/// Scores a batch of generated items. Empty batches score 0 everywhere;
/// malformed items count as invalid. "Unique" counts each distinct valid
/// item once, so `creativity * items.len()` is exactly the number of
/// distinct valid novel items.
pub fn score_items(spec: &CreativeSpec, items: &[Vec<u32>]) -> CreativityScores {
    let n = items.len();
    if n == 0 {
        return CreativityScores { validity: 0.0, uniqueness: 0.0, novelty: 0.0, creativity: 0.0 };
    }
    let mut n_valid = 0usize;
    let mut distinct: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    for item in items {
        if let Some(canon) = canonical_if_valid(spec, item) {
            n_valid += 1;
            *distinct.entry(canon).or_insert(0) += 1;
        }
    }
    let n_distinct = distinct.len();
    let n_novel = distinct
        .keys()
        .filter(|canon| !is_in_train_set(spec, canon))
        .count();
    CreativityScores {
        validity: n_valid as f64 / n as f64,
        uniqueness: if n_valid == 0 { 0.0 } else { n_distinct as f64 / n_valid as f64 },
        novelty: if n_distinct == 0 { 0.0 } else { n_novel as f64 / n_distinct as f64 },
        creativity: n_novel as f64 / n as f64,
    }
}

/// Novelty lookup. Discovery items are stored canonically in `train_set`;
/// construction training sets are empty, so everything valid is novel.
fn is_in_train_set(spec: &CreativeSpec, canon: &[u32]) -> bool {
    match spec.world {
        CreativeWorld::Construction { .. } => false,
        _ => spec.train_set.contains(canon),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> WorldParams {
        WorldParams::default()
    }

    #[test]
    fn sibling_world_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = make_creative_world(CreativeTask::SiblingDiscovery, &params(), &mut rng).unwrap();
        let CreativeWorld::Sibling { parent_of } = &spec.world else { panic!() };
        assert_eq!(parent_of.len(), 64);
        // 16 parents with 4 leaves each -> 96 valid pairs, half in training.
        let mut counts = vec![0; 16];
        for &p in parent_of {
            counts[p as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
        assert_eq!(spec.train_set.len(), 48);
        // Train items are valid canonical pairs.
        for item in &spec.train_set {
            let [a, b] = item[..] else { panic!() };
            assert!(a < b);
            assert_eq!(
                parent_of[(a - NODE_BASE) as usize],
                parent_of[(b - NODE_BASE) as usize]
            );
        }
    }

    #[test]
    fn sibling_scoring_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = make_creative_world(CreativeTask::SiblingDiscovery, &params(), &mut rng).unwrap();
        let train_item = spec.train_set.iter().next().unwrap().clone();
        let wrap = |core: &[u32]| {
            let mut v = vec![BEGIN_TOKEN];
            v.extend_from_slice(core);
            v.push(END_TOKEN);
            v
        };
        // All items identical, valid, in the training set.
        let items = vec![wrap(&train_item); 5];
        let s = score_items(&spec, &items);
        assert_eq!(s.validity, 1.0);
        assert_eq!(s.uniqueness, 1.0 / 5.0);
        assert_eq!(s.novelty, 0.0);
        assert_eq!(s.creativity, 0.0);
        // Empty list scores zero by convention.
        let s = score_items(&spec, &[]);
        assert_eq!(
            (s.validity, s.uniqueness, s.novelty, s.creativity),
            (0.0, 0.0, 0.0, 0.0)
        );
        // A novel valid pair: same parent, not in train_set.
        let CreativeWorld::Sibling { parent_of } = &spec.world else { panic!() };
        let mut novel = None;
        'outer: for a in 0..64u16 {
            for b in (a + 1)..64 {
                if parent_of[a as usize] == parent_of[b as usize] {
                    let canon = vec![NODE_BASE + a as u32, NODE_BASE + b as u32];
                    if !spec.train_set.contains(&canon) {
                        novel = Some(canon);
                        break 'outer;
                    }
                }
            }
        }
        let novel = novel.unwrap();
        // Reversed order must canonicalize to the same item.
        let items = vec![wrap(&novel), wrap(&[novel[1], novel[0]])];
        let s = score_items(&spec, &items);
        assert_eq!(s.validity, 1.0);
        assert_eq!(s.uniqueness, 0.5);
        assert_eq!(s.novelty, 1.0);
        assert_eq!(s.creativity, 0.5);
        // Malformed items are invalid, never errors.
        let junk = vec![
            vec![BEGIN_TOKEN],                                  // no body
            vec![BEGIN_TOKEN, NODE_BASE, NODE_BASE],            // no END
            vec![BEGIN_TOKEN, NODE_BASE, END_TOKEN],            // arity 1
            vec![BEGIN_TOKEN, NODE_BASE, NODE_BASE, END_TOKEN], // repeated leaf
            vec![BEGIN_TOKEN, 5000, 5001, END_TOKEN],           // out of range
        ];
        let s = score_items(&spec, &junk);
        assert_eq!(s.validity, 0.0);
        assert_eq!(s.creativity, 0.0);
    }

    #[test]
    fn scoring_matches_predicate_enumeration_oracle() {
        // Random batch of leaf pairs; compare against brute-force counting
        // with an independently coded uniqueness/novelty pass.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = make_creative_world(CreativeTask::SiblingDiscovery, &params(), &mut rng).unwrap();
        let CreativeWorld::Sibling { parent_of } = &spec.world else { panic!() };
        let items: Vec<Vec<u32>> = (0..300)
            .map(|_| {
                let a = NODE_BASE + rng.random_range(0..64);
                let b = NODE_BASE + rng.random_range(0..64);
                vec![BEGIN_TOKEN, a, b, END_TOKEN]
            })
            .collect();
        let s = score_items(&spec, &items);

        let valid = |item: &[u32]| {
            let (a, b) = (item[1], item[2]);
            a != b
                && (NODE_BASE..NODE_BASE + 64).contains(&a)
                && (NODE_BASE..NODE_BASE + 64).contains(&b)
                && parent_of[(a - NODE_BASE) as usize] == parent_of[(b - NODE_BASE) as usize]
        };
        let mut seen = BTreeSet::new();
        let (mut n_valid, mut n_distinct, mut n_novel) = (0, 0, 0);
        for item in &items {
            if !valid(item) {
                continue;
            }
            n_valid += 1;
            let canon = vec![item[1].min(item[2]), item[1].max(item[2])];
            if seen.insert(canon.clone()) {
                n_distinct += 1;
                if !spec.train_set.contains(&canon) {
                    n_novel += 1;
                }
            }
        }
        assert_eq!(s.validity, n_valid as f64 / 300.0);
        assert_eq!(s.uniqueness, n_distinct as f64 / n_valid as f64);
        assert_eq!(s.novelty, n_novel as f64 / n_distinct as f64);
        assert_eq!(s.creativity, n_novel as f64 / 300.0);
        // Integer identity from the definitions.
        assert_eq!((s.creativity * 300.0).round() as usize, n_novel);
        assert!(s.creativity <= s.validity);
    }

    #[test]
    fn triangle_world_and_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = make_creative_world(CreativeTask::TriangleDiscovery, &params(), &mut rng).unwrap();
        let CreativeWorld::Triangle { n_nodes, edges } = &spec.world else { panic!() };
        assert_eq!(*n_nodes, 24);
        let triangles = enumerate_triangles(*n_nodes, edges);
        assert!(triangles.len() >= 8);
        assert_eq!(spec.train_set.len(), triangles.len() / 2);
        // Any permutation of a training triangle is valid but not novel.
        let tri: Vec<u32> = spec.train_set.iter().next().unwrap().clone();
        let item = vec![BEGIN_TOKEN, tri[2], tri[0], tri[1], END_TOKEN];
        let s = score_items(&spec, &[item]);
        assert_eq!((s.validity, s.novelty, s.creativity), (1.0, 0.0, 0.0));
    }

    #[test]
    fn construction_items_and_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec =
            make_creative_world(CreativeTask::CircleConstruction, &params(), &mut rng).unwrap();
        // Training items parse as valid under their own prompt graph.
        for _ in 0..30 {
            let item = make_train_item(&spec, &mut rng).unwrap();
            assert!(canonical_if_valid(&spec, &item).is_some());
            let s = score_items(&spec, &[item]);
            assert_eq!(s.validity, 1.0);
            assert_eq!(s.novelty, 1.0); // empty train set: valid => novel
        }
        // Breaking the walk spoils validity: repeat a node.
        let mut item = make_train_item(&spec, &mut rng).unwrap();
        let sep = item.iter().position(|&t| t == SEP_TOKEN).unwrap();
        item[sep + 2] = item[sep + 1];
        let s = score_items(&spec, &[item]);
        assert_eq!(s.validity, 0.0);
        // Rotation/reflection of the same cycle is one identity.
        let base = make_train_item(&spec, &mut rng).unwrap();
        let sep = base.iter().position(|&t| t == SEP_TOKEN).unwrap();
        let (prefix, rest) = base.split_at(sep + 1);
        let walk: Vec<u32> = rest[..rest.len() - 1].to_vec();
        let mut rotated = walk.clone();
        rotated.rotate_left(2);
        rotated.reverse();
        let mut other = prefix.to_vec();
        other.extend(&rotated);
        other.push(END_TOKEN);
        let s = score_items(&spec, &[base.clone(), other]);
        assert_eq!(s.validity, 1.0);
        assert_eq!(s.uniqueness, 0.5);
    }

    #[test]
    fn line_construction_direction_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = make_creative_world(CreativeTask::LineConstruction, &params(), &mut rng).unwrap();
        let item = make_train_item(&spec, &mut rng).unwrap();
        let sep = item.iter().position(|&t| t == SEP_TOKEN).unwrap();
        let (prefix, rest) = item.split_at(sep + 1);
        let mut walk: Vec<u32> = rest[..rest.len() - 1].to_vec();
        walk.reverse();
        let mut reversed = prefix.to_vec();
        reversed.extend(&walk);
        reversed.push(END_TOKEN);
        let s = score_items(&spec, &[item, reversed]);
        assert_eq!(s.validity, 1.0);
        assert_eq!(s.uniqueness, 0.5);
    }

    #[test]
    fn eval_prompts_are_solvable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec =
            make_creative_world(CreativeTask::LineConstruction, &params(), &mut rng).unwrap();
        let CreativeWorld::Construction { params: p } = &spec.world else { panic!() };
        for _ in 0..20 {
            let prompt = make_eval_prompt(&spec, &mut rng).unwrap();
            assert_eq!(prompt[0], BEGIN_TOKEN);
            assert_eq!(*prompt.last().unwrap(), SEP_TOKEN);
            let edges: BTreeSet<(u16, u16)> = prompt[1..prompt.len() - 1]
                .chunks_exact(2)
                .map(|e| edge_key((e[0] - NODE_BASE) as u16, (e[1] - NODE_BASE) as u16))
                .collect();
            assert!(
                find_simple_walk(p.n_nodes, &edges, p.target_len, false, &mut rng).is_some()
            );
        }
    }
}
