//! Synthetic detection world.
//!
//! Stands in for images and a backbone: each category is a unit-norm
//! prototype vector, an anchor's feature is the IOU-weighted blend of the
//! prototypes of objects it overlaps plus isotropic Gaussian noise, and pure
//! background anchors are noise only. Novel-category prototypes are drawn
//! from a region of the sphere offset from the base distribution, so a
//! proposal scorer trained on base categories transfers imperfectly — the
//! regime where missed foreground boxes become observable.

use crate::geometry::{iou, Bbox};
use crate::linalg::Matrix;
use crate::rng::{self, derive_rng, tag};
use rand::Rng;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("could not place {objects} objects of size up to {max_size} in extent {extent}")]
    Placement { objects: usize, max_size: f64, extent: f64 },
}

pub type CategoryId = usize;

/// Base/novel category split. Categories `0..n_base` are base, the rest novel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySplit {
    pub base: Vec<CategoryId>,
    pub novel: Vec<CategoryId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_base: usize,
    pub n_novel: usize,
    pub feature_dim: usize,
    /// How far novel prototypes are pulled toward a world-specific direction
    /// away from the base distribution. Zero means novel prototypes are drawn
    /// exactly like base ones.
    pub novel_shift: f64,
    /// Weight of the objectness direction shared by every prototype. This is
    /// what lets a scorer trained on base categories transfer to novel ones
    /// at all; the shift above controls how imperfect that transfer is.
    pub objectness: f64,
    pub noise_sigma: f64,
    pub extent: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub max_objects_per_scene: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_base: 8,
            n_novel: 4,
            feature_dim: 16,
            novel_shift: 2.0,
            objectness: 1.0,
            noise_sigma: 0.1,
            extent: 128.0,
            min_object_size: 24.0,
            max_object_size: 56.0,
            max_objects_per_scene: 3,
        }
    }
}

/// Immutable world parameters: one prototype per category.
#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
}

fn unit_normal_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    rng::fill_normal(rng, &mut v, 1.0);
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

impl World {
    /// Sample category prototypes.
    ///
    /// Every prototype is `normalize(objectness * g + d_cat)` for a shared
    /// objectness direction `g` and a unit category direction `d_cat`. Base
    /// category directions are uniform on the sphere; novel ones are pulled
    /// toward a world-specific center by `novel_shift`, which rotates them
    /// out of the region base training covers.
    pub fn generate(seed: u64, config: WorldConfig) -> World {
        assert!(config.feature_dim >= 4, "feature_dim must be at least 4");
        assert!(config.n_base >= 1 && config.n_novel >= 1);
        let dim = config.feature_dim;
        let mut objectness_rng = derive_rng(seed, &[tag::OBJECTNESS]);
        let objectness_dir = unit_normal_vec(&mut objectness_rng, dim);
        let mut novel_center_rng = derive_rng(seed, &[tag::NOVEL_CENTER]);
        let novel_center = unit_normal_vec(&mut novel_center_rng, dim);
        let mut prototypes = Vec::with_capacity(config.n_base + config.n_novel);
        for cat in 0..config.n_base + config.n_novel {
            let mut rng = derive_rng(seed, &[tag::PROTOTYPE, cat as u64]);
            let mut dir = unit_normal_vec(&mut rng, dim);
            if cat >= config.n_base {
                for (x, c) in dir.iter_mut().zip(&novel_center) {
                    *x += config.novel_shift * c;
                }
                normalize(&mut dir);
            }
            let mut v: Vec<f64> = dir
                .iter()
                .zip(&objectness_dir)
                .map(|(d, g)| d + config.objectness * g)
                .collect();
            normalize(&mut v);
            prototypes.push(v);
        }
        World { seed, config, prototypes }
    }

    pub fn split(&self) -> CategorySplit {
        CategorySplit {
            base: (0..self.config.n_base).collect(),
            novel: (self.config.n_base..self.config.n_base + self.config.n_novel).collect(),
        }
    }

    pub fn n_categories(&self) -> usize {
        self.prototypes.len()
    }

    pub fn prototype(&self, cat: CategoryId) -> &[f64] {
        &self.prototypes[cat]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub category: CategoryId,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Unique within an episode; also keys this scene's feature noise.
    pub id: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<Bbox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Anchor features for one scene: column `i` is the IOU-weighted blend of
/// prototypes of the objects anchor `i` overlaps, plus `noise_sigma` times a
/// standard normal vector keyed by `(world.seed, scene.id, i)`.
pub fn render_features(world: &World, scene: &Scene, anchors: &[Bbox]) -> Matrix {
    let dim = world.config.feature_dim;
    let mut features = Matrix::zeros(dim, anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let mut col = vec![0.0; dim];
        for obj in &scene.objects {
            let w = iou(anchor, &obj.bbox);
            if w > 0.0 {
                for (c, p) in col.iter_mut().zip(world.prototype(obj.category)) {
                    *c += w * p;
                }
            }
        }
        if world.config.noise_sigma > 0.0 {
            let mut rng = derive_rng(world.seed, &[tag::NOISE, scene.id, i as u64]);
            for c in col.iter_mut() {
                *c += world.config.noise_sigma * rng::normal(&mut rng);
            }
        }
        for (d, &v) in col.iter().enumerate() {
            features.set(d, i, v);
        }
    }
    features
}

/// A k-shot episode: base-only training scenes, exactly `shots` support
/// instances per novel class, and mixed test scenes.
#[derive(Debug, Clone)]
pub struct Episode {
    pub split: CategorySplit,
    pub shots: usize,
    pub base_train: Vec<Scene>,
    pub novel_support: Vec<Scene>,
    pub test: Vec<Scene>,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
/// Objects in one scene may overlap at most this much.
const MAX_OBJECT_IOU: f64 = 0.3;

fn place_objects<R: Rng>(
    rng: &mut R,
    config: &WorldConfig,
    categories: &[CategoryId],
    count: usize,
) -> Result<Vec<SceneObject>, WorldError> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let category = categories[rng.gen_range(0..categories.len())];
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(config.min_object_size..=config.max_object_size);
            let h = rng.gen_range(config.min_object_size..=config.max_object_size);
            if w > config.extent || h > config.extent {
                break;
            }
            let x1 = rng.gen_range(0.0..=config.extent - w);
            let y1 = rng.gen_range(0.0..=config.extent - h);
            let bbox = Bbox::new(x1, y1, x1 + w, y1 + h);
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= MAX_OBJECT_IOU) {
                objects.push(SceneObject { category, bbox });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(WorldError::Placement {
                objects: count,
                max_size: config.max_object_size,
                extent: config.extent,
            });
        }
    }
    Ok(objects)
}

/// Build an episode. Scene ids are unique within the episode and drive the
/// feature noise, so everything downstream is a pure function of
/// `(world, episode_seed)`.
pub fn make_episode(
    world: &World,
    shots: usize,
    n_train_scenes: usize,
    n_test_scenes: usize,
    episode_seed: u64,
) -> Result<Episode, WorldError> {
    assert!(shots >= 1, "need at least one shot");
    let split = world.split();
    let config = &world.config;
    let all_categories: Vec<CategoryId> = (0..world.n_categories()).collect();
    let mut next_id = 0u64;
    let mut fresh_scene = |rng: &mut rand_chacha::ChaCha8Rng,
                           categories: &[CategoryId],
                           count: usize|
     -> Result<Scene, WorldError> {
        let objects = place_objects(rng, config, categories, count)?;
        let scene = Scene { id: next_id, objects };
        next_id += 1;
        Ok(scene)
    };

    let mut base_train = Vec::with_capacity(n_train_scenes);
    for s in 0..n_train_scenes {
        let mut rng = derive_rng(episode_seed, &[tag::SCENE, 0, s as u64]);
        let count = rng.gen_range(1..=config.max_objects_per_scene);
        base_train.push(fresh_scene(&mut rng, &split.base, count)?);
    }

    let mut novel_support = Vec::with_capacity(split.novel.len() * shots);
    for (ci, &cat) in split.novel.iter().enumerate() {
        for shot in 0..shots {
            let mut rng = derive_rng(episode_seed, &[tag::SCENE, 1, ci as u64, shot as u64]);
            novel_support.push(fresh_scene(&mut rng, &[cat], 1)?);
        }
    }

    let mut test = Vec::with_capacity(n_test_scenes);
    for s in 0..n_test_scenes {
        let mut rng = derive_rng(episode_seed, &[tag::SCENE, 2, s as u64]);
        let count = rng.gen_range(1..=config.max_objects_per_scene);
        test.push(fresh_scene(&mut rng, &all_categories, count)?);
    }

    Ok(Episode { split, shots, base_train, novel_support, test })
}

impl Episode {
    /// Support instances per base class for balanced fine-tuning: the first
    /// `shots` occurrences of each base category in the training scenes.
    pub fn base_support_instances(&self) -> Vec<(CategoryId, u64, Bbox)> {
        let mut out = Vec::new();
        for &cat in &self.split.base {
            let mut taken = 0;
            'scan: for scene in &self.base_train {
                for obj in &scene.objects {
                    if obj.category == cat {
                        out.push((cat, scene.id, obj.bbox));
                        taken += 1;
                        if taken == self.shots {
                            break 'scan;
                        }
                    }
                }
            }
        }
        out
    }

    /// Line-oriented export: one object per line as
    /// `scene_id category x1 y1 x2 y2`, sections in episode order
    /// (base_train, novel_support, test). Floats use the shortest exact
    /// representation, so the file round-trips bit-exactly.
    pub fn export_objects(&self) -> String {
        let mut out = String::new();
        for scene in self.base_train.iter().chain(&self.novel_support).chain(&self.test) {
            for obj in &scene.objects {
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    scene.id, obj.category, obj.bbox.x1, obj.bbox.y1, obj.bbox.x2, obj.bbox.y2
                )
                .expect("write to string");
            }
        }
        out
    }
}
