//! mothcam — a desk-scale model of a solar-powered insect camera trap.
//!
//! The crate covers the full loop such a trap runs twice a day, plus the
//! offline tooling needed to build and budget it:
//!
//! 1. **tensor** – dense f32 tensor kernels (conv/pool/dense/batchnorm and
//!    their gradients) that everything else is built from.
//! 2. **model** – a small layer-graph representation with builders for the
//!    three candidate classifiers (LeNet-5, VGG16, MobileNetV2) and a
//!    bit-exact weight file format.
//! 3. **opt** – compiler-style passes over a model graph: batch-norm
//!    folding, dropout stripping, constant/horizontal fusion and magnitude
//!    pruning.
//! 4. **train** – synthetic tile dataset, augmentation, minibatch SGD with
//!    early stopping, evaluation metrics and gradient checking.
//! 5. **vision** – the capture-side pipeline: PGM/PPM images, color
//!    correction, Gaussian blur, Canny edges, sliding-window ROI proposal,
//!    classification, non-maximum suppression and annotation.
//! 6. **energy** – per-cycle energy profiles, battery lifetime arithmetic,
//!    solar-panel harvest model and a state-of-charge simulator.
//! 7. **telemetry** – the 11-byte CRC-protected report a trap emits per
//!    cycle, and the moths-per-week treatment alert rule.

pub mod energy;
pub mod model;
pub mod opt;
pub mod telemetry;
pub mod tensor;
pub mod train;
pub mod vision;


pub use tensor::Tensor;
