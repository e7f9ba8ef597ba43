//! Incremental open-set domain adaptation over fixed-length feature vectors.
//!
//! Domains arrive one at a time. Only the first carries labels; later ones are
//! unlabeled and may contain classes never seen before. After a domain has been
//! processed its raw samples are discarded: past knowledge survives only inside
//! a conditional feature generator, which is sampled to rebuild "source" data
//! whenever the next domain arrives. Adaptation trains one classification head
//! per replayed domain against the incoming unlabeled target, and inference
//! combines the heads with a confidence-margin ensemble rule.
//!
//! Module map:
//! - [`diffcore`]: matrices, MLPs with manual reverse-mode gradients, Adam,
//!   gradient reversal, checkpoint serialization, finite-difference checking.
//! - [`datahub`]: feature samples, domain datasets, label-visibility views,
//!   synthetic stream generation, CSV/binary feature files.
//! - [`mdcgan`]: class- and domain-conditioned feature generator with
//!   real/fake, class, and domain discriminator heads.
//! - [`meosda`]: shared extractor + per-source heads trained with source
//!   cross-entropy and an adversarial open-set boundary loss.
//! - [`ensemble`]: confidence-margin head selection over multiple heads.
//! - [`timeline`]: the incremental loop gluing the above together.
//! - [`evalkit`]: open-set accuracy scores and forgetting summaries.
//! - [`gradsuite`]: named finite-difference audits of every trained loss.

pub mod datahub;
pub mod diffcore;
pub mod ensemble;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod mdcgan;
pub mod meosda;
pub mod timeline;

pub use error::{Error, Result};
