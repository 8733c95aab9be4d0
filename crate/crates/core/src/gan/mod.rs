//! Generator-based search for inputs that maximize activated computation.

mod budget;
mod generate;
mod losses;
mod networks;
mod train;

pub use budget::{clip_graph, clip_sample, per_loss, perturbation_norm, PerturbationBudget, BUDGET_SLACK};
pub use generate::generate;
pub use losses::{adv_loss, adv_loss_from_costs, adv_loss_graph, gan_loss, gan_loss_graph};
pub use networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorMeta, GeneratorSpec, Mode};
pub use train::{train_generator, validation_losses, GanTrainConfig, HistoryRow, TrainHistory};
