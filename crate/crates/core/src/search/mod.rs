//! Supernet training, evolutionary path search and meta-test selection.

mod evolve;
mod finetune;
mod train;

pub use evolve::{
    evolve, evolve_with, recombine, select_shortlist, EpisodeSource, FitnessRecord, FixedEpisodes,
    FreshEpisodes, GenerationStats, SearchConfig, SearchHistory, Shortlist, ShortlistEntry,
};
pub use finetune::{
    embed, evaluate_episode, evaluate_fitness, finetune_on_support, score_adapted, support_loss,
    test_time_select, EpisodeScore, FinetuneConfig, Selection,
};
pub use train::{pretrain_backbone, supernet_train, PretrainConfig, TrainConfig, TrainStep};
