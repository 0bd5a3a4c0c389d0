//! Synthetic scene generation, xBD-style label ingestion and batching.

mod batch;
mod generator;
mod image;
pub mod io;
mod raster;
pub mod wkt;

pub use batch::{assemble, crop_batch, full_batches, Batch, CropSpec};
pub use generator::{
    generate_dataset, generate_scene, scene_name, scene_seed, validate_distribution, DamageEffect,
    DomainShift, GeneratorConfig, ScenePair, MAX_PLACEMENT_TRIES,
};
pub use image::RgbImage;
pub use io::{load_dataset, save_dataset};
pub use raster::{contains, rasterize_polygons, PolygonLabel};
pub use wkt::{parse_wkt_bytes, parse_wkt_polygon, Polygon};
