//! Palette-driven image colorization: extraction of uniform, proportional and
//! spatial color palettes, deterministic palette-guided recoloring, survey
//! stimulus generation and the rating statistics used to analyze them.

pub mod color;
pub mod raster;
pub mod recolor;
pub mod palette;
pub mod segmentation;
pub mod stats;
pub mod stimulus;

pub use color::{delta_e, lab_to_srgb, srgb_to_lab, LabColor, RgbColor};
pub use raster::{Image, RasterError};
