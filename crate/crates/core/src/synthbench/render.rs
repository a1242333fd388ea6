use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{BackgroundStyle, Domain, DomainShift, GtObject, Scene, SceneSpec, Split};
use crate::error::Result;
use crate::geometry::BBox;
use crate::rng::stream;

const PLACEMENT_TRIES: usize = 64;

/// Stateless renderer; every scene draws from its own `(seed, id)` stream so
/// generation order never changes content.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    spec: SceneSpec,
    seed: u64,
}

impl SceneGenerator {
    pub fn new(spec: SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, seed })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// The scene as stored in `split`: target splits are shifted.
    pub fn render(&self, split: Split, id: u32) -> Scene {
        match split.domain() {
            Domain::Source => {
                self.render_with(split, id, Domain::Source, &self.spec.source_background, None)
            }
            Domain::Target => self.render_with(
                split,
                id,
                Domain::Target,
                &self.spec.target_background,
                Some(&self.spec.shift),
            ),
        }
    }

    /// Target-style rendering before the shift transform is applied.
    pub fn render_pre_shift(&self, split: Split, id: u32) -> Scene {
        let style = match split.domain() {
            Domain::Source => &self.spec.source_background,
            Domain::Target => &self.spec.target_background,
        };
        self.render_with(split, id, split.domain(), style, None)
    }

    /// Same layout and noise as `render(split, id)` but in source style.
    pub fn render_unshifted(&self, split: Split, id: u32) -> Scene {
        self.render_with(split, id, Domain::Source, &self.spec.source_background, None)
    }

    pub fn render_many(&self, split: Split, ids: &[u32]) -> Vec<Scene> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            ids.par_iter().map(|&id| self.render(split, id)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            ids.iter().map(|&id| self.render(split, id)).collect()
        }
    }

    fn render_with(
        &self,
        split: Split,
        id: u32,
        domain: Domain,
        style: &BackgroundStyle,
        shift: Option<&DomainShift>,
    ) -> Scene {
        let spec = &self.spec;
        let (h, w, ch) = (spec.height, spec.width, spec.channels);
        let mut rng = stream(self.seed, "scene", &[id as u64]);

        let objects = if split == Split::TargetTrain {
            Vec::new()
        } else {
            self.sample_layout(&mut rng)
        };
        let colors: Vec<Vec<f64>> = objects
            .iter()
            .map(|o| {
                spec.class_colors[o.class]
                    .iter()
                    .map(|&base| base + jitter(&mut rng, spec.color_jitter))
                    .collect()
            })
            .collect();

        let mut img = vec![0.0f64; h * w * ch];
        for c in 0..ch {
            let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let smooth = box_blur(&noise, h, w, style.smoothing);
            for (i, v) in smooth.into_iter().enumerate() {
                img[i * ch + c] = style.mean[c] + style.amplitude * v;
            }
        }
        for (o, color) in objects.iter().zip(&colors) {
            let b = o.bbox;
            for y in b.y1 as usize..b.y2 as usize {
                for x in b.x1 as usize..b.x2 as usize {
                    for c in 0..ch {
                        img[(y * w + x) * ch + c] = color[c];
                    }
                }
            }
        }
        img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));

        if let Some(shift) = shift {
            let mut noise_rng = stream(self.seed, "shift", &[id as u64]);
            let normal = (shift.noise_std > 0.0)
                .then(|| Normal::new(0.0, shift.noise_std).expect("validated std"));
            for (i, p) in img.iter_mut().enumerate() {
                let c = i % ch;
                let mut v = shift.scale[c] * *p + shift.offset[c];
                if let Some(n) = &normal {
                    v += n.sample(&mut noise_rng);
                }
                *p = v.clamp(0.0, 1.0);
            }
        }

        Scene {
            id,
            domain,
            height: h,
            width: w,
            channels: ch,
            pixels: img.into_iter().map(|p| p as f32).collect(),
            objects,
        }
    }

    /// Non-overlapping boxes; the first placement always succeeds.
    fn sample_layout(&self, rng: &mut impl Rng) -> Vec<GtObject> {
        let spec = &self.spec;
        let [lo, hi] = spec.objects_per_scene;
        let [smin, smax] = spec.object_size;
        let count = rng.random_range(lo..=hi);
        let mut objects: Vec<GtObject> = Vec::with_capacity(count);
        for _ in 0..count {
            let class = rng.random_range(0..spec.num_classes);
            for _ in 0..PLACEMENT_TRIES {
                let bw = rng.random_range(smin..=smax);
                let bh = rng.random_range(smin..=smax);
                let x1 = rng.random_range(0..=spec.width - bw);
                let y1 = rng.random_range(0..=spec.height - bh);
                let bbox = BBox::new(x1 as f64, y1 as f64, (x1 + bw) as f64, (y1 + bh) as f64);
                if objects.iter().all(|o| o.bbox.iou_unchecked(&bbox) == 0.0) {
                    objects.push(GtObject { class, bbox });
                    break;
                }
            }
        }
        objects
    }
}

fn jitter(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..half_width)
    } else {
        0.0
    }
}

/// Mean over the `(2r+1)²` window clipped to the grid.
fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut acc = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    acc += src[yy * w + xx];
                }
            }
            out[y * w + x] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_shift_reproduces_pre_shift_rendering() {
        let mut spec = SceneSpec::default();
        spec.shift = DomainShift::identity(3);
        let gen = SceneGenerator::new(spec, 5).unwrap();
        for id in 0..6 {
            for split in [Split::TargetTrain, Split::TargetVal] {
                let a = gen.render(split, id);
                let b = gen.render_pre_shift(split, id);
                assert_eq!(a.pixels, b.pixels);
                assert_eq!(a.objects, b.objects);
            }
        }
    }

    #[test]
    fn shifted_and_unshifted_share_layout() {
        let gen = SceneGenerator::new(SceneSpec::default(), 2).unwrap();
        let t = gen.render(Split::TargetVal, 4);
        let s = gen.render_unshifted(Split::TargetVal, 4);
        assert_eq!(t.objects, s.objects);
        assert_ne!(t.pixels, s.pixels);
        assert_eq!(s.domain, Domain::Source);
    }

    #[test]
    fn rendering_is_order_independent() {
        let gen = SceneGenerator::new(SceneSpec::default(), 8).unwrap();
        let forward: Vec<_> = (0..5).map(|i| gen.render(Split::SourceTrain, i)).collect();
        let backward: Vec<_> = (0..5).rev().map(|i| gen.render(Split::SourceTrain, i)).collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn objects_do_not_overlap() {
        let gen = SceneGenerator::new(SceneSpec::default(), 1).unwrap();
        for id in 0..50 {
            let s = gen.render(Split::SourceTrain, id);
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert_eq!(a.bbox.iou_unchecked(&b.bbox), 0.0);
                }
            }
        }
    }
}
