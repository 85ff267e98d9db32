//! Scene archives: generated point clouds and labels in the container
//! format, with the generating domain recorded in the header.

use std::fmt::Write as _;
use std::path::Path;

use sop2::numkernel::Tensor;
use sop2::par;
use sop2::pointcloud::{gen_scene, BoxLabel, DomainParams, Extent, PointCloud, SceneLabel};
use sop2::{Error, Result};

use crate::container::{header_fields, Container};

/// Columns of a `scene.{i}.boxes` table.
pub const BOX_COLUMNS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneArchive {
    pub domain_name: String,
    pub domain: DomainParams,
    pub seed: u64,
    pub extent: Extent,
    pub scenes: Vec<(PointCloud, SceneLabel)>,
}

/// Seed of scene `i` in an archive generated with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

impl SceneArchive {
    pub fn generate(seed: u64, domain_name: &str, domain: DomainParams, extent: Extent, n: usize) -> Result<Self> {
        domain.validate()?;
        let scenes = par::map_range(n, |i| gen_scene(scene_seed(seed, i), &domain, &extent))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(SceneArchive {
            domain_name: domain_name.to_string(),
            domain,
            seed,
            extent,
            scenes,
        })
    }

    fn header(&self) -> String {
        let d = &self.domain;
        let e = &self.extent;
        let mut h = String::from("kind = scenes\n");
        let _ = write!(
            h,
            "domain = {}\nseed = {}\nscenes = {}\ndensity = {}\nheight_offset = {}\nintensity_bias = {}\n\
             box_scale = {}\nclass_mix = {},{},{}\nextent = {},{},{},{},{},{}\n",
            self.domain_name,
            self.seed,
            self.scenes.len(),
            d.density,
            d.height_offset,
            d.intensity_bias,
            d.box_scale,
            d.class_mix[0],
            d.class_mix[1],
            d.class_mix[2],
            e.x_min,
            e.x_max,
            e.y_min,
            e.y_max,
            e.z_min,
            e.z_max,
        );
        h
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(self.header());
        for (i, (pc, labels)) in self.scenes.iter().enumerate() {
            c.push(format!("scene.{i}.points"), Tensor::from_rows(&pc.points)?.reshape(&[pc.points.len(), 4])?);
            let rows: Vec<[f64; BOX_COLUMNS]> = labels
                .boxes
                .iter()
                .map(|b| [b.cx, b.cy, b.length, b.width, b.yaw, b.class as f64])
                .collect();
            c.push(format!("scene.{i}.boxes"), Tensor::from_rows(&rows)?.reshape(&[rows.len(), BOX_COLUMNS])?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let fields = header_fields(&c.header);
        let get = |k: &str| {
            fields
                .iter()
                .find(|(key, _)| *key == k)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Format(format!("scene archive header lacks `{k}`")))
        };
        if get("kind")? != "scenes" {
            return Err(Error::Format("container is not a scene archive".into()));
        }
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad `{k}` in scene archive header")))
        };
        let nums = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Format(format!("bad `{k}` in header"))))
                .collect()
        };
        let mix = nums("class_mix")?;
        let ext = nums("extent")?;
        if mix.len() != 3 || ext.len() != 6 {
            return Err(Error::Format("class_mix needs 3 values and extent 6".into()));
        }
        let domain = DomainParams {
            density: num("density")?,
            height_offset: num("height_offset")?,
            intensity_bias: num("intensity_bias")?,
            box_scale: num("box_scale")?,
            class_mix: [mix[0], mix[1], mix[2]],
        };
        let extent = Extent {
            x_min: ext[0],
            x_max: ext[1],
            y_min: ext[2],
            y_max: ext[3],
            z_min: ext[4],
            z_max: ext[5],
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::Format("bad `seed` in scene archive header".into()))?;
        let n: usize = get("scenes")?
            .parse()
            .map_err(|_| Error::Format("bad `scenes` in scene archive header".into()))?;
        if c.tensors.len() != 2 * n {
            return Err(Error::Format(format!("{} tensors for {n} scenes", c.tensors.len())));
        }
        let table = |name: String, cols: usize| -> Result<&Tensor> {
            let t = c.get(&name).ok_or_else(|| Error::Format(format!("missing `{name}`")))?;
            if t.shape().len() != 2 || t.shape()[1] != cols {
                return Err(Error::Format(format!("`{name}` has shape {:?}", t.shape())));
            }
            Ok(t)
        };
        let scenes = (0..n)
            .map(|i| {
                let pts = table(format!("scene.{i}.points"), 4)?;
                // f32 storage may nudge a coordinate just past the range edge.
                let points = (0..pts.rows())
                    .map(|r| {
                        let p = pts.row(r);
                        [
                            p[0].clamp(extent.x_min, extent.x_max),
                            p[1].clamp(extent.y_min, extent.y_max),
                            p[2].clamp(extent.z_min, extent.z_max),
                            p[3],
                        ]
                    })
                    .collect();
                let boxes = table(format!("scene.{i}.boxes"), BOX_COLUMNS)?;
                let boxes = (0..boxes.rows())
                    .map(|r| {
                        let b = boxes.row(r);
                        let class = b[5] as usize;
                        if b[5] != class as f64 || class >= sop2::pointcloud::NUM_CLASSES {
                            return Err(Error::Format(format!("scene {i}: bad class id {}", b[5])));
                        }
                        Ok(BoxLabel {
                            cx: b[0],
                            cy: b[1],
                            length: b[2],
                            width: b[3],
                            yaw: b[4],
                            class,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok((PointCloud { points, extent }, SceneLabel { boxes }))
            })
            .collect::<Result<_>>()?;
        Ok(SceneArchive {
            domain_name: get("domain")?.to_string(),
            domain,
            seed,
            extent,
            scenes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
