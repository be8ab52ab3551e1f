//! The staged experiment: each stage reads the previous stage's files from
//! the output directory and writes its own.
//!
//! Seeds: every stage derives its randomness from the experiment seed and
//! fixed tags, so any stage can be rerun alone and reproduce its outputs.
//!
//! | stage            | tags                                   |
//! |------------------|----------------------------------------|
//! | benchmark        | `"benchmark"`, then domain id          |
//! | backbone init    | `"backbone-init"`                      |
//! | pretrain         | `"pretrain-stage"`, step               |
//! | train-supernet   | `"supernet-train"`, step               |
//! | search           | `"search-init"` / `"search-breed"` / `"search-episodes"` |
//! | eval, ablate     | `"eval"`, domain id, episode index     |

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::episodes::{Benchmark, Domain, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::search::{evolve, pretrain_backbone, select_shortlist, supernet_train, SearchHistory, Shortlist};
use crate::supernet::{Backbone, PathEncoding, Supernet};

use super::config::ExperimentConfig;
use super::methods::{evaluate_methods, Corner, EpisodeResult, Method};
use super::report::{export_snapshots, read_history, write_history, write_point_biserial, write_results, AblationReport};
use super::stats::point_biserial;

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "NFTS_OUT_DIR";

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const SUPERNET_FILE: &str = "supernet.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const HISTORY_FILE: &str = "search_history.csv";
pub const SHORTLIST_FILE: &str = "shortlist.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_EPISODES_FILE: &str = "ablation_episodes.csv";
pub const POINT_BISERIAL_FILE: &str = "point_biserial.csv";
pub const SNAPSHOT_FILE: &str = "snapshots.csv";

pub fn results_file(m: Method) -> String {
    format!("results_{}.csv", m.tag())
}

/// Pipeline stages in run order.
pub const STAGES: [&str; 8] = [
    "pretrain",
    "train-supernet",
    "search",
    "shortlist",
    "eval",
    "ablate",
    "analyze",
    "export",
];

pub struct Pipeline {
    cfg: ExperimentConfig,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.cfg.out_dir.join(file)
    }

    /// Config lines embedded at the top of every results file. The output
    /// directory is left out so runs in different places compare equal.
    pub fn provenance(&self) -> String {
        let mut cfg = self.cfg.clone();
        cfg.out_dir = PathBuf::new();
        cfg.provenance_header()
            .lines()
            .filter(|l| !l.starts_with("# out_dir "))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    fn create(&self, file: &str) -> Result<BufWriter<File>> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        Ok(BufWriter::new(File::create(self.path(file))?))
    }

    fn open(&self, file: &str, stage: &'static str) -> Result<BufReader<File>> {
        let path = self.path(file);
        match File::open(&path) {
            Ok(f) => Ok(BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingStage { path, stage }),
            Err(e) => Err(e.into()),
        }
    }

    /// Synthetic domains plus any CSV domains, which join the unseen set.
    pub fn benchmark(&self) -> Result<Benchmark<f64>> {
        let seed = rng::derive_seed(self.cfg.seed, &["benchmark".into()]);
        let mut bench = self.cfg.benchmark_spec().build(seed)?;
        for path in &self.cfg.csv_domains {
            bench.unseen.push(Domain::load_csv(path, self.cfg.split_ratio, seed)?);
        }
        Ok(bench)
    }

    pub fn load_backbone(&self) -> Result<Backbone<f64>> {
        Ok(Backbone::load(&mut self.open(BACKBONE_FILE, "pretrain")?)?.0)
    }

    pub fn load_supernet(&self) -> Result<Supernet<f64>> {
        Ok(Supernet::load(&mut self.open(SUPERNET_FILE, "train-supernet")?)?.0)
    }

    pub fn load_history(&self) -> Result<SearchHistory> {
        read_history(self.open(HISTORY_FILE, "search")?)
    }

    pub fn load_shortlist(&self) -> Result<Shortlist> {
        let mut text = String::new();
        std::io::Read::read_to_string(&mut self.open(SHORTLIST_FILE, "shortlist")?, &mut text)?;
        Shortlist::parse(&text)
    }

    pub fn pretrain(&self) -> Result<String> {
        let bench = self.benchmark()?;
        let mut init = rng::stream(self.cfg.seed, &["backbone-init".into()]);
        let mut backbone = Backbone::init(&self.cfg.layer_dims(), self.cfg.activation, &mut init)?;
        let seed = rng::derive_seed(self.cfg.seed, &["pretrain-stage".into()]);
        let losses = pretrain_backbone(&mut backbone, &bench.seen, &self.cfg.pretrain_config(seed))?;
        let mut w = self.create(BACKBONE_FILE)?;
        backbone.save(self.cfg.seed, &mut w)?;
        w.flush()?;
        Ok(format!(
            "pretrain: {} episodes, final loss {:.4}, wrote {}",
            losses.len(),
            tail_mean(&losses),
            self.path(BACKBONE_FILE).display()
        ))
    }

    pub fn train_supernet(&self) -> Result<String> {
        let backbone = self.load_backbone()?;
        let bench = self.benchmark()?;
        let mut net = Supernet::from_backbone(&backbone, self.cfg.adapter)?;
        let steps = supernet_train(&mut net, &bench.seen, &self.cfg.train_config())?;
        let mut w = self.create(SUPERNET_FILE)?;
        net.save(self.cfg.seed, &mut w)?;
        w.flush()?;
        let mut log = self.create(TRAIN_LOG_FILE)?;
        log.write_all(self.provenance().as_bytes())?;
        writeln!(log, "step,domain_id,path_bits,loss")?;
        for (i, s) in steps.iter().enumerate() {
            writeln!(log, "{i},{},{},{:?}", bench.seen[s.domain].id, s.path, s.loss)?;
        }
        log.flush()?;
        let losses: Vec<f64> = steps.iter().map(|s| s.loss).collect();
        Ok(format!(
            "train-supernet: {} episodes, final loss {:.4}, wrote {}",
            steps.len(),
            tail_mean(&losses),
            self.path(SUPERNET_FILE).display()
        ))
    }

    pub fn search(&self) -> Result<String> {
        let net = self.load_supernet()?;
        let bench = self.benchmark()?;
        let history = evolve(&net, &bench.seen, &self.cfg.search_config())?;
        let mut w = self.create(HISTORY_FILE)?;
        write_history(&history, &self.provenance(), &mut w)?;
        w.flush()?;
        let best = history.records().first().map(|r| (r.path.to_bit_string(), r.fitness));
        let (bits, fit) = best.unwrap_or_default();
        Ok(format!(
            "search: {} generations, {} evaluations, {} distinct paths, best {bits} ({fit:.4}), wrote {}",
            history.generations().len(),
            history.evaluations().len(),
            history.len(),
            self.path(HISTORY_FILE).display()
        ))
    }

    pub fn shortlist(&self) -> Result<String> {
        let history = self.load_history()?;
        let list = select_shortlist(&history, self.cfg.shortlist_n, self.cfg.diversity_t)?;
        let mut w = self.create(SHORTLIST_FILE)?;
        w.write_all(self.provenance().as_bytes())?;
        w.write_all(list.to_text().as_bytes())?;
        w.flush()?;
        let paths: Vec<String> = list.paths().iter().map(PathEncoding::to_bit_string).collect();
        Ok(format!(
            "shortlist: {} of {} paths [{}]{}, wrote {}",
            list.len(),
            self.cfg.shortlist_n,
            paths.join(" "),
            if list.underfilled { " (diversity threshold left it short)" } else { "" },
            self.path(SHORTLIST_FILE).display()
        ))
    }

    /// Evaluates `methods` on the same `episodes` test-split episodes of
    /// every test domain, in domain, episode, method order.
    pub fn evaluate(&self, methods: &[Method], episodes: usize) -> Result<(Vec<String>, Vec<EpisodeResult>)> {
        let net = self.load_supernet()?;
        let shortlist = if methods.iter().any(|m| m.needs_shortlist()) {
            self.load_shortlist()?.paths()
        } else {
            Vec::new()
        };
        let bench = self.benchmark()?;
        let domains: Vec<&Domain<f64>> = bench.test_domains().collect();
        let shape = self.cfg.shape();
        let ft = self.cfg.test_finetune();
        let jobs: Vec<(&Domain<f64>, usize)> =
            domains.iter().flat_map(|&d| (0..episodes).map(move |e| (d, e))).collect();
        let per_episode = jobs
            .par_iter()
            .map(|&(d, e)| {
                let mut r = rng::stream(self.cfg.seed, &["eval".into(), d.id.as_str().into(), e.into()]);
                let ep = shape.sample(d, Split::Test, &mut r)?;
                evaluate_methods(&net, methods, &shortlist, &ep, e, &ft)
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = domains.iter().map(|d| d.id.clone()).collect();
        Ok((ids, per_episode.into_iter().flatten().collect()))
    }

    pub fn eval(&self, method: Method, episodes: Option<usize>) -> Result<String> {
        let n = episodes.unwrap_or(self.cfg.test_episodes);
        if n == 0 {
            return Err(Error::InvalidArgument("episode count must be positive".into()));
        }
        let (domains, results) = self.evaluate(&[method], n)?;
        let report = AblationReport::from_results(&[method], &domains, &results)?;
        let file = results_file(method);
        let mut w = self.create(&file)?;
        write_results(&results, &self.provenance(), &mut w)?;
        w.flush()?;
        let (mean, hw) = *report.rows[0].cells.last().expect("average cell");
        Ok(format!(
            "eval {}: {} episodes, accuracy {:.2}% ± {:.2}, wrote {}",
            method.tag(),
            results.len(),
            100.0 * mean,
            100.0 * hw,
            self.path(&file).display()
        ))
    }

    /// Configured corners followed by NFTS-1 and NFTS-N.
    pub fn ablation_methods(&self) -> Vec<Method> {
        self.cfg
            .corners
            .iter()
            .map(|&c| Method::Corner(c))
            .chain([Method::Nfts1, Method::NftsN])
            .collect()
    }

    pub fn ablate_report(&self) -> Result<AblationReport> {
        let methods = self.ablation_methods();
        let (domains, results) = self.evaluate(&methods, self.cfg.test_episodes)?;
        let report = AblationReport::from_results(&methods, &domains, &results)?;
        let provenance = self.provenance();
        let mut w = self.create(ABLATION_EPISODES_FILE)?;
        write_results(&results, &provenance, &mut w)?;
        w.flush()?;
        let mut w = self.create(ABLATION_FILE)?;
        report.write_csv(&provenance, &mut w)?;
        w.flush()?;
        Ok(report)
    }

    pub fn ablate(&self) -> Result<String> {
        let report = self.ablate_report()?;
        let avg = |m| report.average(m).unwrap_or(f64::NAN) * 100.0;
        Ok(format!(
            "{}ablate: frozen {:.2}%, NFTS-1 {:.2}%, NFTS-N {:.2}%, wrote {}",
            report.to_table(),
            avg(Method::Corner(Corner::Frozen)),
            avg(Method::Nfts1),
            avg(Method::NftsN),
            self.path(ABLATION_FILE).display()
        ))
    }

    pub fn analyze(&self) -> Result<String> {
        let history = self.load_history()?;
        let k = history
            .num_layers()
            .ok_or_else(|| Error::InvalidArgument("empty search history".into()))?;
        let corr = point_biserial(&history, k)?;
        let mut w = self.create(POINT_BISERIAL_FILE)?;
        write_point_biserial(&corr, &self.provenance(), &mut w)?;
        w.flush()?;
        let strongest = corr
            .iter()
            .enumerate()
            .filter(|(_, c)| c.defined)
            .max_by(|a, b| a.1.r.abs().total_cmp(&b.1.r.abs()));
        let note = match strongest {
            Some((i, c)) => format!(
                "strongest bit {i} (layer {} {}) r={:.3}",
                i / 2,
                if i % 2 == 0 { "adapter" } else { "finetune" },
                c.r
            ),
            None => "no defined correlations".into(),
        };
        Ok(format!(
            "analyze: {} bits over {} paths, {note}, wrote {}",
            corr.len(),
            history.len(),
            self.path(POINT_BISERIAL_FILE).display()
        ))
    }

    pub fn export(&self) -> Result<String> {
        let history = self.load_history()?;
        let mut w = self.create(SNAPSHOT_FILE)?;
        export_snapshots(&history, &self.provenance(), &mut w)?;
        w.flush()?;
        Ok(format!(
            "export: {} rows, wrote {}",
            history.evaluations().len(),
            self.path(SNAPSHOT_FILE).display()
        ))
    }

    /// Every stage except the standalone `eval`, in order.
    pub fn run_all(&self) -> Result<Vec<String>> {
        Ok(vec![
            self.pretrain()?,
            self.train_supernet()?,
            self.search()?,
            self.shortlist()?,
            self.ablate()?,
            self.analyze()?,
            self.export()?,
        ])
    }
}

fn tail_mean(v: &[f64]) -> f64 {
    let n = v.len().min(100);
    if n == 0 {
        return f64::NAN;
    }
    v[v.len() - n..].iter().sum::<f64>() / n as f64
}
