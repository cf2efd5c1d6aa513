//! Occupancy-divergence training for autoregressive sequence models that can
//! delete their own output.
//!
//! Generation is treated as a sequence MDP: a state is a prefix rooted at
//! `<bos>`, actions insert a symbol, end the sequence, or backspace. Instead
//! of maximum likelihood on expert prefixes, the model is fit by minimizing a
//! divergence between the discounted state-action occupancy of the data and
//! that of the model, estimated from data and model samples with the policy
//! logits playing the role of soft Q-values.
//!
//! Everything runs on tabular policies over an enumerated state space, which
//! makes exact occupancies and exact divergences available as oracles.
//!
//! | module | contents |
//! |---|---|
//! | [`seq_mdp`] | vocabulary, states, edit actions, the enumerated space |
//! | [`occupancy`] | finite MDPs, exact occupancies, soft Bellman operators |
//! | [`divergence`] | the concave transforms φ and the mixture regularizer |
//! | [`policy`] | tabular softmax policies and sampling with rollback |
//! | [`preprocess`] | masks and position ids for backspace sequences, noise augmentation |
//! | [`objective`] | the sample-based loss, its gradient, exact counterparts |
//! | [`trainer`] | replay buffer, schedules, optimizer, the training loop |
//! | [`evalx`] | rep-n, diversity, validity rates, the chain experiment |
//! | [`dataio`] | dataset formats and checkpoints |
//! | [`cli`] | the `seqmatch` command |
//!
//! ```
//! use seqmatch::trainer::{load_train_dataset, train, TrainConfig};
//!
//! let cfg = TrainConfig { steps: 50, ..TrainConfig::default() };
//! let data = load_train_dataset(&cfg).unwrap();
//! let out = train(&data, &cfg, |_, _| Ok(())).unwrap();
//! assert!(out.summary.kl_exact_final.is_some());
//! ```

pub mod cli;
pub mod dataio;
pub mod divergence;
pub mod error;
pub mod evalx;
pub mod math;
pub mod objective;
pub mod occupancy;
pub mod policy;
pub mod preprocess;
pub mod seq_mdp;
pub mod toy;
pub mod trainer;

pub use divergence::{PhiKind, PhiSpec};
pub use error::{Error, Result};
pub use policy::{SampleConfig, TabularPolicy};
pub use seq_mdp::{EditAction, SeqSpace, SeqState, Token, Trajectory, Vocab};
pub use trainer::{ObjectiveKind, TrainConfig};
