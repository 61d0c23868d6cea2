//! Learning a [`ConceptDelta`](crate::lora::ConceptDelta) from a handful of
//! image embeddings, plus the textual-inversion baseline.

mod gradcheck;
mod inversion;
mod loss;
mod train;

pub use gradcheck::{gradcheck, GradCheckOptions, GradCheckReport, ParamCheck};
pub use inversion::{train_textual_inversion, InversionConfig, TextualInversion};
pub use loss::{negative_loss, polar_loss, LossBreakdown, SiteGrads, TrainPair};
pub use train::{train_polar, IterationRecord, OrthoSlot, TrainConfig, TrainReport};

/// Caption templates with one `{}` slot for the concept placeholder.
pub const TEMPLATES: [&str; 8] = [
    "an image of {}",
    "a photo of {}",
    "a picture of {}",
    "a photo of a {}",
    "an image of a {}",
    "a cropped photo of {}",
    "a close-up photo of {}",
    "a bright photo of {}",
];

pub fn default_templates() -> Vec<String> {
    TEMPLATES.iter().map(|t| t.to_string()).collect()
}

/// Substitutes `placeholder` into the template's single `{}` slot.
pub fn fill_template(template: &str, placeholder: &str) -> String {
    template.replacen("{}", placeholder, 1)
}
