use rscn_core::geometry::{self, BBox};
use rscn_core::gradcheck::run_gradcheck;
use rscn_core::synthbench::{SceneGenerator, SceneSpec, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneView {
    pub width: u32,
    pub height: u32,
    pub rgba: Vec<u8>,
    pub boxes: Vec<f64>,
    pub classes: Vec<u32>,
}

/// Scene `id` of `split` under the default benchmark spec. With `unshifted`
/// a target scene keeps its layout but is drawn in source style.
pub fn render_scene(seed: u64, split: &str, id: u32, unshifted: bool) -> Result<SceneView, String> {
    let split = Split::parse(split).ok_or_else(|| format!("unknown split {split:?}"))?;
    let gen = SceneGenerator::new(SceneSpec::default(), seed).map_err(|e| e.to_string())?;
    let scene = if unshifted { gen.render_unshifted(split, id) } else { gen.render(split, id) };
    let mut rgba = Vec::with_capacity(scene.width * scene.height * 4);
    for px in scene.pixels.chunks(scene.channels) {
        for c in 0..3 {
            let v = px[c.min(scene.channels - 1)];
            rgba.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        rgba.push(255);
    }
    Ok(SceneView {
        width: scene.width as u32,
        height: scene.height as u32,
        rgba,
        boxes: scene.objects.iter().flat_map(|o| o.bbox.as_array()).collect(),
        classes: scene.objects.iter().map(|o| o.class as u32).collect(),
    })
}

fn bbox(v: &[f64]) -> Result<BBox, String> {
    match *v {
        [x1, y1, x2, y2] => Ok(BBox::new(x1, y1, x2, y2)),
        _ => Err(format!("a box has 4 coordinates, got {}", v.len())),
    }
}

pub fn iou(a: &[f64], b: &[f64]) -> Result<f64, String> {
    geometry::iou(&bbox(a)?, &bbox(b)?).map_err(|e| e.to_string())
}

/// One line per check: name, trials, worst relative error, verdict.
pub fn gradcheck(seed: u64, trials: usize) -> Result<String, String> {
    if trials == 0 {
        return Err("trials must be positive".into());
    }
    let report = run_gradcheck(seed, trials).map_err(|e| e.to_string())?;
    let mut out = String::new();
    for c in &report.checks {
        let verdict = if c.passed { "ok" } else { "FAIL" };
        out.push_str(&format!("{:<22}{:>5}  {:.2e}  {verdict}\n", c.name, c.trials, c.max_rel_err));
    }
    Ok(out)
}
