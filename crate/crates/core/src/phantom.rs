//! Procedural 32×32 chest phantoms with three multi-label disease analogs and
//! tight ground-truth boxes.
//!
//! Intensities (before noise): background −1, soft tissue −0.1, lung −0.6,
//! heart +0.45. Lesions: a disc of level +0.4..0.6 inside a lung (nodule), a
//! graded brightening of the bottom band of one lung (effusion), a widened
//! heart (cardiomegaly).

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SIDE: usize = 32;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["cardiomegaly", "nodule", "effusion"];
pub const CARDIOMEGALY: usize = 0;
pub const NODULE: usize = 1;
pub const EFFUSION: usize = 2;

/// Heart-to-torso width ratio separating healthy from enlarged hearts.
pub const CARDIO_RATIO_THRESHOLD: f64 = 0.55;
pub const NOISE_SIGMA: f64 = 0.05;

const BACKGROUND: f64 = -1.0;
const TISSUE: f64 = -0.1;
const LUNG: f64 = -0.6;
const HEART: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.rx;
        let dy = (y as f64 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub torso: Ellipse,
    pub lungs: [Ellipse; 2],
    pub heart: Ellipse,
}

impl Anatomy {
    pub fn heart_ratio(&self) -> f64 {
        self.heart.rx / self.torso.rx
    }

    /// Lung pixels not covered by the heart, for one lung.
    pub fn lung_field(&self, side: usize, x: usize, y: usize) -> bool {
        self.lungs[side].contains(x, y) && !self.heart.contains(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nodule {
    pub lung: usize,
    pub cx: usize,
    pub cy: usize,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effusion {
    pub lung: usize,
    pub height: usize,
    pub intensity: f64,
}

/// Full description of one phantom; rendering it is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub anatomy: Anatomy,
    pub labels: [bool; NUM_CLASSES],
    pub nodule: Option<Nodule>,
    pub effusion: Option<Effusion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub class: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    fn around(class: usize, pixels: &[usize]) -> Option<Self> {
        let xs = pixels.iter().map(|p| p % SIDE);
        let ys = pixels.iter().map(|p| p / SIDE);
        Some(Self { class, x0: xs.clone().min()?, y0: ys.clone().min()?, x1: xs.max()?, y1: ys.max()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSample {
    pub id: String,
    /// Row-major `SIDE × SIDE` image in `[−1, 1]`.
    pub image: Vec<f64>,
    pub labels: [bool; NUM_CLASSES],
    pub bboxes: Vec<BBox>,
    pub labeled: bool,
    /// Pixel indices of each present lesion, by class.
    #[serde(skip)]
    pub lesion_pixels: Vec<(usize, Vec<usize>)>,
    #[serde(skip)]
    pub anatomy: Option<Anatomy>,
}

impl PhantomSample {
    pub fn bbox(&self, class: usize) -> Option<&BBox> {
        self.bboxes.iter().find(|b| b.class == class)
    }

    pub fn label_vector(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

fn uni(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

impl PhantomSpec {
    /// Draws anatomy and lesion geometry consistent with `labels`.
    pub fn sample(seed: u64, labels: [bool; NUM_CLASSES]) -> Result<Self> {
        let mut last_err = None;
        for attempt in 0..16 {
            let mut r = rng::stream(seed, "phantom-geometry", attempt);
            match Self::sample_once(&mut r, seed, labels) {
                Ok(s) => return Ok(s),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn sample_once(r: &mut Rng, seed: u64, labels: [bool; NUM_CLASSES]) -> Result<Self> {
        let torso = Ellipse { cx: 15.5 + uni(r, -0.5, 0.5), cy: 16.0 + uni(r, -0.5, 0.5), rx: uni(r, 12.5, 14.0), ry: uni(r, 13.5, 15.0) };
        let lung_cy = torso.cy - uni(r, 2.0, 3.0);
        let mut lungs = [torso; 2];
        for (i, lung) in lungs.iter_mut().enumerate() {
            let off = uni(r, 6.5, 7.5);
            *lung = Ellipse {
                cx: if i == 0 { torso.cx - off } else { torso.cx + off },
                cy: lung_cy + uni(r, -0.3, 0.3),
                rx: uni(r, 4.8, 5.6),
                ry: uni(r, 8.0, 9.5),
            };
        }
        let ratio = if labels[CARDIOMEGALY] { uni(r, 0.63, 0.74) } else { uni(r, 0.36, 0.47) };
        let heart = Ellipse { cx: torso.cx + uni(r, -0.5, 0.5), cy: torso.cy + uni(r, 4.5, 5.5), rx: ratio * torso.rx, ry: uni(r, 3.5, 4.5) };
        let anatomy = Anatomy { torso, lungs, heart };

        let nodule = if labels[NODULE] {
            let lung = r.random_range(0..2);
            let radius = uni(r, 2.0, 4.0);
            let intensity = uni(r, 0.4, 0.6);
            Some(place_nodule(r, &anatomy, lung, radius, intensity)?)
        } else {
            None
        };
        let effusion = if labels[EFFUSION] {
            Some(Effusion { lung: r.random_range(0..2), height: r.random_range(4..=8), intensity: uni(r, 0.3, 0.5) })
        } else {
            None
        };
        let spec = Self { seed, anatomy, labels, nodule, effusion };
        if let Some(e) = &spec.effusion {
            if effusion_pixels(&anatomy, e).len() < 6 {
                return Err(Error::GeometryInfeasible("effusion band has fewer than 6 lung pixels".into()));
            }
        }
        Ok(spec)
    }
}

fn disc_pixels(cx: usize, cy: usize, radius: f64) -> Vec<(isize, isize)> {
    let r = radius.ceil() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                out.push((cx as isize + dx, cy as isize + dy));
            }
        }
    }
    out
}

/// A nodule must sit in the upper half of a lung field, clear of the heart.
fn nodule_fits(a: &Anatomy, lung: usize, cx: usize, cy: usize, radius: f64) -> bool {
    disc_pixels(cx, cy, radius).into_iter().all(|(x, y)| {
        x >= 0 && y >= 0 && (x as usize) < SIDE && (y as f64) < a.lungs[lung].cy && a.lung_field(lung, x as usize, y as usize)
    })
}

fn place_nodule(r: &mut Rng, a: &Anatomy, lung: usize, radius: f64, intensity: f64) -> Result<Nodule> {
    let l = a.lungs[lung];
    let (x_lo, x_hi) = ((l.cx - l.rx).floor().max(0.0) as usize, (l.cx + l.rx).ceil().min(SIDE as f64 - 1.0) as usize);
    let (y_lo, y_hi) = ((l.cy - l.ry).floor().max(0.0) as usize, l.cy.floor() as usize);
    let candidates: Vec<(usize, usize)> = (y_lo..=y_hi)
        .flat_map(|y| (x_lo..=x_hi).map(move |x| (x, y)))
        .filter(|&(x, y)| nodule_fits(a, lung, x, y, radius))
        .collect();
    let &(cx, cy) = candidates
        .choose(r)
        .ok_or_else(|| Error::GeometryInfeasible(format!("no room for a radius {radius:.2} nodule")))?;
    Ok(Nodule { lung, cx, cy, radius, intensity })
}

fn effusion_pixels(a: &Anatomy, e: &Effusion) -> Vec<(usize, f64)> {
    let field: Vec<usize> = (0..SIDE * SIDE).filter(|&p| a.lung_field(e.lung, p % SIDE, p / SIDE)).collect();
    let Some(bottom) = field.iter().map(|p| p / SIDE).max() else { return Vec::new() };
    let top = bottom + 1 - e.height.min(bottom + 1);
    field
        .into_iter()
        .filter(|p| p / SIDE >= top)
        .map(|p| (p, e.intensity * ((p / SIDE - top + 1) as f64) / e.height as f64))
        .collect()
}

/// Renders a phantom. Fails if the lesion geometry is not realisable.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomSample> {
    let a = &spec.anatomy;
    if spec.labels[NODULE] != spec.nodule.is_some() || spec.labels[EFFUSION] != spec.effusion.is_some() {
        return Err(Error::GeometryInfeasible("lesion list disagrees with labels".into()));
    }
    let ratio = a.heart_ratio();
    if (ratio > CARDIO_RATIO_THRESHOLD) != spec.labels[CARDIOMEGALY] {
        return Err(Error::GeometryInfeasible(format!("heart ratio {ratio:.3} disagrees with cardiomegaly label")));
    }
    let mut img = vec![BACKGROUND; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = y * SIDE + x;
            if a.torso.contains(x, y) {
                img[p] = TISSUE;
            }
            if a.lungs[0].contains(x, y) || a.lungs[1].contains(x, y) {
                img[p] = LUNG;
            }
            if a.heart.contains(x, y) {
                img[p] = HEART;
            }
        }
    }
    let mut lesions = Vec::new();
    if spec.labels[CARDIOMEGALY] {
        let heart: Vec<usize> = (0..SIDE * SIDE).filter(|&p| a.heart.contains(p % SIDE, p / SIDE)).collect();
        lesions.push((CARDIOMEGALY, heart));
    }
    if let Some(n) = &spec.nodule {
        if !(2.0..=4.0).contains(&n.radius) || !nodule_fits(a, n.lung, n.cx, n.cy, n.radius) {
            return Err(Error::GeometryInfeasible("nodule does not fit inside the lung field".into()));
        }
        let px: Vec<usize> = disc_pixels(n.cx, n.cy, n.radius).into_iter().map(|(x, y)| y as usize * SIDE + x as usize).collect();
        for &p in &px {
            img[p] = n.intensity;
        }
        lesions.push((NODULE, px));
    }
    if let Some(e) = &spec.effusion {
        if !(4..=8).contains(&e.height) {
            return Err(Error::GeometryInfeasible(format!("effusion height {}", e.height)));
        }
        let px = effusion_pixels(a, e);
        if px.len() < 6 {
            return Err(Error::GeometryInfeasible("effusion band has fewer than 6 lung pixels".into()));
        }
        for &(p, inc) in &px {
            img[p] += inc;
        }
        lesions.push((EFFUSION, px.into_iter().map(|(p, _)| p).collect()));
    }
    let mut r = rng::stream(spec.seed, "phantom-noise", 0);
    for v in img.iter_mut() {
        *v = (*v + NOISE_SIGMA * rng::normal(&mut r)).clamp(-1.0, 1.0);
    }
    let bboxes = lesions.iter().filter_map(|(c, px)| BBox::around(*c, px)).collect();
    Ok(PhantomSample {
        id: String::new(),
        image: img,
        labels: spec.labels,
        bboxes,
        labeled: false,
        lesion_pixels: lesions,
        anatomy: Some(*a),
    })
}

/// Recovers the labels from a rendered image given only its anatomy, using
/// fixed intensity thresholds at known locations.
pub fn analytic_labels(image: &[f64], a: &Anatomy) -> [bool; NUM_CLASSES] {
    let at = |x: f64, y: f64| image[(y.round() as usize).min(SIDE - 1) * SIDE + (x.round() as usize).min(SIDE - 1)];
    // heart reaches the threshold width on its centre row
    let reach = CARDIO_RATIO_THRESHOLD * a.torso.rx;
    let edge = 0.5 * (at(a.heart.cx - reach, a.heart.cy) + at(a.heart.cx + reach, a.heart.cy));
    let cardio = edge > 0.2;

    // bright 3×3 patch in the upper lung fields
    let mut nodule = false;
    for side in 0..2 {
        let upper = |x: usize, y: usize| a.lung_field(side, x, y) && (y as f64) < a.lungs[side].cy;
        for y in 1..SIDE - 1 {
            for x in 1..SIDE - 1 {
                let mut sum = 0.0;
                let mut all = true;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (xx, yy) = (x + dx - 1, y + dy - 1);
                        all &= upper(xx, yy);
                        sum += image[yy * SIDE + xx];
                    }
                }
                if all && sum / 9.0 > LUNG + 0.2 {
                    nodule = true;
                }
            }
        }
    }

    // lowest two lung-field rows brighter than plain lung
    let mut effusion = false;
    for side in 0..2 {
        let field: Vec<usize> = (0..SIDE * SIDE).filter(|&p| a.lung_field(side, p % SIDE, p / SIDE)).collect();
        if let Some(bottom) = field.iter().map(|p| p / SIDE).max() {
            let band: Vec<f64> = field.iter().filter(|&&p| p / SIDE + 1 >= bottom).map(|&p| image[p]).collect();
            let mean = band.iter().sum::<f64>() / band.len() as f64;
            if mean > LUNG + 0.15 {
                effusion = true;
            }
        }
    }
    [cardio, nodule, effusion]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<PhantomSample>,
    pub test: Vec<PhantomSample>,
}

/// First `round(fraction·n)` entries of a seeded permutation, so smaller
/// fractions are nested in larger ones.
pub fn labeled_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::ConfigInvalid(format!("label_fraction {fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "labeled-subset", 0));
    let m = (fraction * n as f64).round() as usize;
    let mut flags = vec![false; n];
    for &i in &order[..m] {
        flags[i] = true;
    }
    Ok(flags)
}

fn draw_split(n: usize, priors: &[f64; NUM_CLASSES], seed: u64, split: &str) -> Result<Vec<PhantomSample>> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &format!("labels-{split}"), i as u64);
            let mut labels = [false; NUM_CLASSES];
            for (l, &p) in labels.iter_mut().zip(priors) {
                *l = r.random_bool(p);
            }
            let spec = PhantomSpec::sample(rng::stream_id(seed, &format!("phantom-{split}"), i as u64), labels)?;
            let mut s = generate_phantom(&spec)?;
            s.id = format!("{split}_{i:05}");
            Ok(s)
        })
        .collect()
}

pub fn build_dataset(n_train: usize, n_test: usize, priors: [f64; NUM_CLASSES], label_fraction: f64, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::ConfigInvalid("dataset splits must be nonempty".into()));
    }
    if let Some(&p) = priors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidPrior(p));
    }
    let mut train = draw_split(n_train, &priors, seed, "train")?;
    let test = draw_split(n_test, &priors, seed, "test")?;
    for (s, f) in train.iter_mut().zip(labeled_subset(n_train, label_fraction, seed)?) {
        s.labeled = f;
    }
    Ok(Dataset { train, test })
}
