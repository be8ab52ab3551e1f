//! Evolutionary search over paths and diversity-constrained shortlisting.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::episodes::{Domain, Episode, EpisodeShape, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::supernet::{PathEncoding, Supernet};

use super::finetune::{evaluate_fitness, FinetuneConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub population_size: usize,
    /// Size of the recombination pool, and the number of offspring and
    /// eliminations per generation.
    pub top_m: usize,
    pub mutation_rate: f64,
    pub generations: usize,
    pub finetune_epochs: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub shortlist_n: usize,
    pub diversity_t: f64,
    /// Episodes drawn per training domain per generation.
    pub episodes_per_eval: usize,
    /// Stop once mean population fitness has improved by less than this for
    /// `convergence_window` consecutive generations.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub shape: EpisodeShape,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 64,
            top_m: 8,
            mutation_rate: 0.05,
            generations: 15,
            finetune_epochs: 20,
            eta1: 0.1,
            eta2: 0.05,
            shortlist_n: 3,
            diversity_t: 0.4,
            episodes_per_eval: 1,
            convergence_tol: 0.001,
            convergence_window: 3,
            shape: EpisodeShape::default(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.population_size < 2 {
            return bad(format!("population size must be at least 2, got {}", self.population_size));
        }
        if self.top_m == 0 || self.top_m >= self.population_size {
            return bad(format!(
                "top_m must be in 1..population_size ({}), got {}",
                self.population_size, self.top_m
            ));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad(format!("mutation rate {} outside [0, 1]", self.mutation_rate));
        }
        if self.shortlist_n == 0 {
            return bad("shortlist_n must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.diversity_t) {
            return bad(format!("diversity threshold {} outside [0, 1]", self.diversity_t));
        }
        if self.episodes_per_eval == 0 {
            return bad("episodes_per_eval must be at least 1".into());
        }
        if !(self.eta1 >= 0.0) || !(self.eta2 >= 0.0) {
            return bad("fine-tuning step sizes must be non-negative".into());
        }
        Ok(())
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            eta1: self.eta1,
            eta2: self.eta2,
        }
    }
}

/// One fitness evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FitnessRecord {
    pub path: PathEncoding,
    pub fitness: f64,
    pub generation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub population: Vec<PathEncoding>,
}

/// Everything a search evaluated.
///
/// The evaluation log keeps every (generation, path, fitness) triple in the
/// order produced. The deduplicated view keeps one record per distinct
/// path, holding the best fitness it ever reached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchHistory {
    evaluations: Vec<FitnessRecord>,
    best: HashMap<PathEncoding, FitnessRecord>,
    generations: Vec<GenerationStats>,
}

impl SearchHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: FitnessRecord) {
        match self.best.get_mut(&rec.path) {
            Some(existing) if existing.fitness >= rec.fitness => {}
            Some(existing) => *existing = rec.clone(),
            None => {
                self.best.insert(rec.path.clone(), rec.clone());
            }
        }
        self.evaluations.push(rec);
    }

    /// Rebuilds a history from its evaluation log, where each generation's
    /// records appear in population order.
    pub fn from_evaluations(records: Vec<FitnessRecord>) -> Result<Self> {
        let mut h = Self::new();
        let mut start = 0;
        while start < records.len() {
            let g = records[start].generation;
            let end = start + records[start..].iter().take_while(|r| r.generation == g).count();
            if h.generations.last().is_some_and(|last| last.generation >= g) {
                return Err(Error::InvalidArgument(format!("generation {g} is out of order in the history")));
            }
            let fitness: Vec<f64> = records[start..end].iter().map(|r| r.fitness).collect();
            let population = records[start..end].iter().map(|r| r.path.clone()).collect();
            for r in &records[start..end] {
                h.push(r.clone());
            }
            h.record_generation(g, &fitness, population);
            start = end;
        }
        Ok(h)
    }

    fn record_generation(&mut self, generation: usize, fitness: &[f64], population: Vec<PathEncoding>) {
        let best = fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = fitness.iter().sum::<f64>() / fitness.len() as f64;
        self.generations.push(GenerationStats {
            generation,
            best,
            mean,
            population,
        });
    }

    pub fn evaluations(&self) -> &[FitnessRecord] {
        &self.evaluations
    }

    /// Distinct paths, best fitness first; ties go to the earlier
    /// generation, then to the lexicographically smaller bit string.
    pub fn records(&self) -> Vec<&FitnessRecord> {
        let mut v: Vec<&FitnessRecord> = self.best.values().collect();
        v.sort_by(|a, b| {
            b.fitness
                .total_cmp(&a.fitness)
                .then(a.generation.cmp(&b.generation))
                .then_with(|| a.path.cmp(&b.path))
        });
        v
    }

    pub fn best_fitness(&self, p: &PathEncoding) -> Option<f64> {
        self.best.get(p).map(|r| r.fitness)
    }

    pub fn len(&self) -> usize {
        self.best.len()
    }

    pub fn is_empty(&self) -> bool {
        self.best.is_empty()
    }

    pub fn generations(&self) -> &[GenerationStats] {
        &self.generations
    }

    pub fn num_layers(&self) -> Option<usize> {
        self.evaluations.first().map(|r| r.path.num_layers())
    }
}

/// Supplies the evaluation episodes of each generation.
pub trait EpisodeSource<T>: Sync {
    fn episodes(&self, generation: usize) -> Result<Vec<Episode<T>>>;

    /// True when every generation sees the same episodes, which makes
    /// fitness a pure function of the path.
    fn is_fixed(&self) -> bool {
        false
    }
}

/// Fresh meta-train episodes every generation, `per_domain` from each
/// domain, from the stream `(seed, "search-episodes", generation, domain)`.
pub struct FreshEpisodes<'a, T> {
    pub domains: &'a [Domain<T>],
    pub shape: EpisodeShape,
    pub per_domain: usize,
    pub seed: u64,
}

impl<T: Scalar> EpisodeSource<T> for FreshEpisodes<'_, T> {
    fn episodes(&self, generation: usize) -> Result<Vec<Episode<T>>> {
        let mut out = Vec::with_capacity(self.domains.len() * self.per_domain);
        for d in self.domains {
            let mut rng = rng::stream(
                self.seed,
                &["search-episodes".into(), generation.into(), d.id.as_str().into()],
            );
            for _ in 0..self.per_domain {
                out.push(self.shape.sample(d, Split::Train, &mut rng)?);
            }
        }
        Ok(out)
    }
}

/// The same episodes every generation.
pub struct FixedEpisodes<T>(pub Vec<Episode<T>>);

impl<T: Scalar> EpisodeSource<T> for FixedEpisodes<T> {
    fn episodes(&self, _generation: usize) -> Result<Vec<Episode<T>>> {
        Ok(self.0.clone())
    }

    fn is_fixed(&self) -> bool {
        true
    }
}

/// Runs the search on fresh meta-train episodes from `domains`.
pub fn evolve<T: Scalar>(net: &Supernet<T>, domains: &[Domain<T>], cfg: &SearchConfig) -> Result<SearchHistory> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("search needs at least one domain".into()));
    }
    let source = FreshEpisodes {
        domains,
        shape: cfg.shape,
        per_domain: cfg.episodes_per_eval,
        seed: cfg.seed,
    };
    evolve_with(net, &source, cfg)
}

/// Uniform crossover of two parents followed by per-bit mutation.
pub fn recombine<R: Rng + ?Sized>(a: &PathEncoding, b: &PathEncoding, mutation_rate: f64, rng: &mut R) -> PathEncoding {
    let mut child = a.clone();
    for (bit, &other) in child.bits_mut().iter_mut().zip(b.bits()) {
        if rng.random::<bool>() {
            *bit = other;
        }
        if rng.random::<f64>() < mutation_rate {
            *bit = !*bit;
        }
    }
    child
}

/// Evolutionary search.
///
/// Each generation evaluates the whole population on that generation's
/// episodes, breeds `top_m` offspring from parents drawn out of the
/// `top_m` fittest, drops the `top_m` least fit evaluated members and adds
/// the offspring, which are scored in the next generation.
pub fn evolve_with<T: Scalar>(
    net: &Supernet<T>,
    source: &dyn EpisodeSource<T>,
    cfg: &SearchConfig,
) -> Result<SearchHistory> {
    cfg.validate()?;
    let k = net.num_layers();
    let ft = cfg.finetune();
    let mut init_rng = rng::stream(cfg.seed, &["search-init".into()]);
    let mut population: Vec<PathEncoding> = (0..cfg.population_size)
        .map(|_| PathEncoding::sample_uniform(k, &mut init_rng))
        .collect();
    let mut history = SearchHistory::new();
    let mut cache: HashMap<PathEncoding, f64> = HashMap::new();
    let mut stalled = 0;

    for generation in 0..cfg.generations {
        let episodes = source.episodes(generation)?;
        let fitness: Vec<f64> = if source.is_fixed() {
            let todo: Vec<PathEncoding> = {
                let mut seen = std::collections::HashSet::new();
                population
                    .iter()
                    .filter(|p| !cache.contains_key(*p) && seen.insert((*p).clone()))
                    .cloned()
                    .collect()
            };
            let fresh = todo
                .par_iter()
                .map(|p| evaluate_fitness(net, p, &episodes, &ft))
                .collect::<Result<Vec<_>>>()?;
            cache.extend(todo.into_iter().zip(fresh));
            population.iter().map(|p| cache[p]).collect()
        } else {
            population
                .par_iter()
                .map(|p| evaluate_fitness(net, p, &episodes, &ft))
                .collect::<Result<Vec<_>>>()?
        };

        for (p, &f) in population.iter().zip(&fitness) {
            history.push(FitnessRecord {
                path: p.clone(),
                fitness: f,
                generation,
            });
        }
        let prev_mean = history.generations.last().map(|g| g.mean);
        history.record_generation(generation, &fitness, population.clone());
        let (best, mean) = history.generations.last().map(|g| (g.best, g.mean)).unwrap_or_default();
        if let Some(prev) = prev_mean {
            if mean - prev < cfg.convergence_tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
        log::debug!("generation {generation}: best {best:.4} mean {mean:.4}");
        if cfg.convergence_window > 0 && stalled >= cfg.convergence_window {
            log::info!("search converged after {} generations", generation + 1);
            break;
        }
        if generation + 1 == cfg.generations {
            break;
        }

        // stable ranking: fitter first, earlier population slot on ties
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
        let pool = &order[..cfg.top_m];
        let mut rng = rng::stream(cfg.seed, &["search-breed".into(), generation.into()]);
        let offspring: Vec<PathEncoding> = (0..cfg.top_m)
            .map(|_| {
                let i = rng.random_range(0..pool.len());
                let j = if pool.len() > 1 {
                    let j = rng.random_range(0..pool.len() - 1);
                    if j >= i { j + 1 } else { j }
                } else {
                    i
                };
                recombine(&population[pool[i]], &population[pool[j]], cfg.mutation_rate, &mut rng)
            })
            .collect();
        let survivors = &order[..population.len() - cfg.top_m];
        let mut next: Vec<PathEncoding> = survivors.iter().map(|&i| population[i].clone()).collect();
        next.extend(offspring);
        population = next;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortlistEntry {
    pub path: PathEncoding,
    pub fitness: f64,
}

/// The paths carried from meta-train to meta-test.
#[derive(Clone, Debug, PartialEq)]
pub struct Shortlist {
    pub entries: Vec<ShortlistEntry>,
    /// Fewer than the requested number of paths met the diversity
    /// threshold.
    pub underfilled: bool,
}

impl Shortlist {
    pub fn paths(&self) -> Vec<PathEncoding> {
        self.entries.iter().map(|e| e.path.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Text form: one `<bits> <fitness>` line per entry.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {:.17}\n", e.path, e.fitness))
            .collect()
    }

    /// Parses [`Shortlist::to_text`]; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let bits = parts.next().unwrap_or_default();
            let fitness = parts
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("shortlist line {}: missing fitness", i + 1)))?
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("shortlist line {}: bad fitness", i + 1)))?;
            entries.push(ShortlistEntry {
                path: PathEncoding::parse(bits)?,
                fitness,
            });
        }
        if entries.is_empty() {
            return Err(Error::InvalidArgument("shortlist is empty".into()));
        }
        Ok(Self {
            entries,
            underfilled: false,
        })
    }
}

/// Greedy pick in fitness order: a path joins the list only if its cosine
/// distance to every path already on it is at least `t`. Stops at `n`.
pub fn select_shortlist(history: &SearchHistory, n: usize, t: f64) -> Result<Shortlist> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("cannot shortlist from an empty history".into()));
    }
    let mut entries: Vec<ShortlistEntry> = Vec::with_capacity(n);
    for rec in history.records() {
        if entries.len() == n {
            break;
        }
        if entries.iter().all(|e| e.path.cosine_distance(&rec.path) >= t) {
            entries.push(ShortlistEntry {
                path: rec.path.clone(),
                fitness: rec.fitness,
            });
        }
    }
    let underfilled = entries.len() < n;
    if underfilled {
        log::warn!("only {} of {n} paths satisfy diversity threshold {t}", entries.len());
    }
    Ok(Shortlist { entries, underfilled })
}
