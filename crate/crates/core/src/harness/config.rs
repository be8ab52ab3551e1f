//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::episodes::{BenchmarkSpec, EpisodeShape, Range};
use crate::error::{Error, Result};
use crate::grad::Activation;
use crate::search::{FinetuneConfig, PretrainConfig, SearchConfig, TrainConfig};
use crate::supernet::AdapterKind;

use super::methods::Corner;

/// Named bundles of defaults. `full` is the complete search and
/// evaluation budget; `desk` shrinks the search and the test episode count
/// so a full run finishes in minutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Full,
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Profile::Full),
            "desk" => Some(Profile::Desk),
            _ => None,
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, String);

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        // `{:?}` is the shortest text that reads back to the same value
        format!("{self:?}")
    }
}

impl Value for PathBuf {
    fn parse_value(s: &str) -> Option<Self> {
        (!s.is_empty()).then(|| PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Activation {
    fn parse_value(s: &str) -> Option<Self> {
        Activation::parse(s)
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for AdapterKind {
    fn parse_value(s: &str) -> Option<Self> {
        AdapterKind::parse(s)
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for Profile {
    fn parse_value(s: &str) -> Option<Self> {
        Profile::parse(s)
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for Corner {
    fn parse_value(s: &str) -> Option<Self> {
        Corner::parse(s)
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl<V: Value> Value for Vec<V> {
    fn parse_value(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|p| V::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($( $(#[$m:meta])* $key:ident : $t:ty ),* $(,)?) => {
        /// Every knob of an experiment. Field names double as config keys.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ExperimentConfig {
            $( $(#[$m])* pub $key: $t, )*
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $( stringify!($key) => {
                        self.$key = <$t as Value>::parse_value(value).ok_or_else(|| {
                            Error::Config(format!("invalid value {value:?} for key `{key}`"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// All keys with their values, in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($key), Value::render(&self.$key)) ),*]
            }
        }
    };
}

config! {
    profile: Profile,
    seed: u64,
    out_dir: PathBuf,

    n_seen: usize,
    n_unseen: usize,
    d_in: usize,
    n_classes: usize,
    noise_min: f64,
    noise_max: f64,
    transform_scale: f64,
    shift_scale: f64,
    unseen_shift_scale: f64,
    max_condition: f64,
    split_ratio: f64,
    n_way_max: usize,
    /// Extra test domains loaded from CSV files.
    csv_domains: Vec<PathBuf>,

    hidden_dims: Vec<usize>,
    embed_dim: usize,
    activation: Activation,
    adapter: AdapterKind,

    way_min: usize,
    way_max: usize,
    shot_min: usize,
    shot_max: usize,
    n_query: usize,

    pretrain_episodes: usize,
    pretrain_lr: f64,
    train_episodes: usize,
    eta1: f64,
    eta2: f64,

    population: usize,
    top_m: usize,
    mutation_rate: f64,
    generations: usize,
    search_epochs: usize,
    episodes_per_eval: usize,
    convergence_tol: f64,
    convergence_window: usize,
    shortlist_n: usize,
    diversity_t: f64,

    test_epochs: usize,
    test_episodes: usize,
    corners: Vec<Corner>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let bench = BenchmarkSpec::default();
        let search = SearchConfig::default();
        let shape = EpisodeShape::default();
        let mut cfg = Self {
            profile,
            seed: 0,
            out_dir: PathBuf::from("nfts-out"),
            n_seen: bench.n_seen,
            n_unseen: bench.n_unseen,
            d_in: bench.d_in,
            n_classes: bench.n_classes,
            noise_min: bench.noise_min,
            noise_max: bench.noise_max,
            transform_scale: bench.transform_scale,
            shift_scale: bench.shift_scale,
            unseen_shift_scale: bench.unseen_shift_scale,
            max_condition: bench.max_condition,
            split_ratio: bench.split_ratio,
            n_way_max: bench.n_way_max,
            csv_domains: Vec::new(),
            hidden_dims: vec![64; 7],
            embed_dim: 64,
            activation: Activation::Relu,
            adapter: AdapterKind::Residual,
            way_min: shape.ways.min,
            way_max: shape.ways.max,
            shot_min: shape.shots.min,
            shot_max: shape.shots.max,
            n_query: shape.n_query,
            pretrain_episodes: 2000,
            pretrain_lr: 0.05,
            train_episodes: 2000,
            eta1: search.eta1,
            eta2: search.eta2,
            population: search.population_size,
            top_m: search.top_m,
            mutation_rate: search.mutation_rate,
            generations: search.generations,
            search_epochs: search.finetune_epochs,
            episodes_per_eval: search.episodes_per_eval,
            convergence_tol: search.convergence_tol,
            convergence_window: search.convergence_window,
            shortlist_n: search.shortlist_n,
            diversity_t: search.diversity_t,
            test_epochs: 40,
            test_episodes: 600,
            corners: Corner::ALL.to_vec(),
        };
        if profile == Profile::Desk {
            cfg.population = 16;
            cfg.generations = 10;
            cfg.test_episodes = 100;
        }
        cfg
    }

    /// Parses config text. A `profile` line, wherever it appears, selects
    /// the defaults that the remaining lines override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            entries.push((i + 1, k.trim(), v.trim()));
        }
        let mut profile = Profile::Desk;
        for &(line, k, v) in &entries {
            if k == "profile" {
                profile = Profile::parse(v)
                    .ok_or_else(|| Error::Config(format!("line {line}: unknown profile {v:?}")))?;
            }
        }
        let mut cfg = Self::for_profile(profile);
        for (line, k, v) in entries {
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {line}: {}", e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not `key=value`")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The config as `# key = value` lines, prepended to every results file.
    pub fn provenance_header(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dims.contains(&0) || self.embed_dim == 0 || self.d_in == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.way_min < 2 || self.way_min > self.way_max || self.shot_min == 0 || self.shot_min > self.shot_max {
            return fail("episode ranges need 2 <= way_min <= way_max and 1 <= shot_min <= shot_max".into());
        }
        if self.n_query == 0 {
            return fail("n_query must be positive".into());
        }
        if self.test_episodes == 0 {
            return fail("test_episodes must be positive".into());
        }
        if self.n_seen == 0 {
            return fail("at least one seen domain is required".into());
        }
        self.search_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.pretrain_lr >= 0.0) {
            return fail("pretrain_lr must be non-negative".into());
        }
        Ok(())
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            n_seen: self.n_seen,
            n_unseen: self.n_unseen,
            d_in: self.d_in,
            n_classes: self.n_classes,
            noise_min: self.noise_min,
            noise_max: self.noise_max,
            transform_scale: self.transform_scale,
            shift_scale: self.shift_scale,
            unseen_shift_scale: self.unseen_shift_scale,
            max_condition: self.max_condition,
            split_ratio: self.split_ratio,
            n_way_max: self.n_way_max,
        }
    }

    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            ways: Range::new(self.way_min, self.way_max),
            shots: Range::new(self.shot_min, self.shot_max),
            n_query: self.n_query,
        }
    }

    /// Backbone widths from input to embedding.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_in];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            episodes: self.pretrain_episodes,
            lr: self.pretrain_lr,
            shape: self.shape(),
            seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            episodes_total: self.train_episodes,
            eta1: self.eta1,
            eta2: self.eta2,
            shape: self.shape(),
            seed: self.seed,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            population_size: self.population,
            top_m: self.top_m,
            mutation_rate: self.mutation_rate,
            generations: self.generations,
            finetune_epochs: self.search_epochs,
            eta1: self.eta1,
            eta2: self.eta2,
            shortlist_n: self.shortlist_n,
            diversity_t: self.diversity_t,
            episodes_per_eval: self.episodes_per_eval,
            convergence_tol: self.convergence_tol,
            convergence_window: self.convergence_window,
            shape: self.shape(),
            seed: self.seed,
        }
    }

    pub fn test_finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.test_epochs,
            eta1: self.eta1,
            eta2: self.eta2,
        }
    }
}
