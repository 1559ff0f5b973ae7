//! Semi-supervised object detection with instant pseudo labeling,
//! weak/strong augmentation and two-model co-rectification, sized to train on
//! a desk machine against a procedurally generated shapes dataset.

pub mod augment;
pub mod boxgeom;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod report;
pub mod rng;
pub mod sample;
pub mod synthdata;
pub mod teaching;
pub mod trainer;

pub use boxgeom::{iou, nms, BBox, BoxDelta};
pub use detector::{ArchConfig, Detection, DetectorState};
pub use error::{Error, Result};
pub use eval::{evaluate, pseudo_quality, EvalResult, Labeler};
pub use sample::{Annotation, AnnotationSet, AnnotationSource, Image, ImageSample};
pub use synthdata::{Dataset, DatasetSplit, GenConfig};
pub use checkpoint::{Checkpoint, ModelState};
pub use teaching::{corectify_pseudo_label, pseudo_label, PseudoLabelSet};
pub use trainer::{lr_at, train, train_step, ModelPair, TrainConfig, TrainMode, Trainer};
