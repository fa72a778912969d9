use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{normalize_surface, Corpus, WinogradSchema};
use crate::error::{Error, Result};

/// Held-out split at unit granularity (a pair or a single).
///
/// Units that share a candidate lexeme, directly or transitively, form one
/// group and always land on the same side, so held-out candidates never
/// appear in training. Groups are shuffled by `seed` and assigned to the
/// held-out side first-fit until it holds `round(fraction * units)` units;
/// when group sizes do not allow the exact count it may hold fewer.
pub fn split(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("held-out fraction {fraction} must lie in (0, 1)")));
    }
    let units: Vec<Vec<String>> = corpus
        .pairs
        .iter()
        .map(|p| lexemes(&p.first))
        .chain(corpus.singles.iter().map(lexemes))
        .collect();

    let mut ids: HashMap<&str, usize> = HashMap::new();
    for lex in units.iter().flatten() {
        let next = ids.len();
        ids.entry(lex.as_str()).or_insert(next);
    }
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    for lex in &units {
        let a = find(&mut parent, ids[lex[0].as_str()]);
        let b = find(&mut parent, ids[lex[1].as_str()]);
        parent[a] = b;
    }

    // groups in order of first appearance, so the shuffle input is stable
    let mut group_of_root: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (u, lex) in units.iter().enumerate() {
        let root = find(&mut parent, ids[lex[0].as_str()]);
        let g = *group_of_root.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(u);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let target = (fraction * units.len() as f64).round() as usize;
    let mut held = vec![false; units.len()];
    let mut taken = 0;
    for g in &groups {
        if taken + g.len() <= target {
            taken += g.len();
            for &u in g {
                held[u] = true;
            }
        }
    }

    let mut train = Corpus::new(format!("{}-train", corpus.name));
    let mut eval = Corpus::new(format!("{}-eval", corpus.name));
    let n_pairs = corpus.pairs.len();
    for (i, p) in corpus.pairs.iter().enumerate() {
        let side = if held[i] { &mut eval } else { &mut train };
        side.pairs.push(p.clone());
    }
    for (i, s) in corpus.singles.iter().enumerate() {
        let side = if held[n_pairs + i] { &mut eval } else { &mut train };
        side.singles.push(s.clone());
    }
    Ok((train, eval))
}

fn lexemes(s: &WinogradSchema) -> Vec<String> {
    s.candidates.iter().map(|c| normalize_surface(&c.surface)).collect()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}
