//! Canonical data model shared by the generator, the model, and the metrics:
//! image-text pairs, manipulation annotations, and model predictions.

use serde::{Deserialize, Serialize};

/// The four fine-grained manipulation types, in the fixed label order
/// (face swap, face attribute, text swap, text attribute).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManipType {
    FaceSwap,
    FaceAttribute,
    TextSwap,
    TextAttribute,
}

impl ManipType {
    pub const ALL: [ManipType; 4] = [
        ManipType::FaceSwap,
        ManipType::FaceAttribute,
        ManipType::TextSwap,
        ManipType::TextAttribute,
    ];

    /// Index of this type inside a 4-way multi-label vector.
    pub fn index(self) -> usize {
        match self {
            ManipType::FaceSwap => 0,
            ManipType::FaceAttribute => 1,
            ManipType::TextSwap => 2,
            ManipType::TextAttribute => 3,
        }
    }

    /// Stable string used in the dataset manifest.
    pub fn manifest_name(self) -> &'static str {
        match self {
            ManipType::FaceSwap => "face_swap",
            ManipType::FaceAttribute => "face_attribute",
            ManipType::TextSwap => "text_swap",
            ManipType::TextAttribute => "text_attribute",
        }
    }

    pub fn from_manifest_name(s: &str) -> Option<ManipType> {
        match s {
            "face_swap" => Some(ManipType::FaceSwap),
            "face_attribute" => Some(ManipType::FaceAttribute),
            "text_swap" => Some(ManipType::TextSwap),
            "text_attribute" => Some(ManipType::TextAttribute),
            _ => None,
        }
    }

    /// Short display tag (FS / FA / TS / TA).
    pub fn tag(self) -> &'static str {
        match self {
            ManipType::FaceSwap => "FS",
            ManipType::FaceAttribute => "FA",
            ManipType::TextSwap => "TS",
            ManipType::TextAttribute => "TA",
        }
    }

    pub fn is_image_side(self) -> bool {
        matches!(self, ManipType::FaceSwap | ManipType::FaceAttribute)
    }

    pub fn is_text_side(self) -> bool {
        !self.is_image_side()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Axis-aligned box with corners normalized to [0,1].
/// The all-zero box is the canonical "no manipulated region" marker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const ZERO: BBox = BBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Zero-area boxes mean "nothing to ground".
    pub fn is_degenerate(&self) -> bool {
        self.area() == 0.0
    }

    pub fn is_ordered(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn in_unit_range(&self) -> bool {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        ok(self.x1) && ok(self.y1) && ok(self.x2) && ok(self.y2)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Scale a normalized box to pixel coordinates.
pub fn bbox_denormalize(b: &BBox, width: u32, height: u32) -> Result<BBox, String> {
    if width == 0 || height == 0 {
        return Err(format!("nonpositive image dimensions {width}x{height}"));
    }
    Ok(BBox {
        x1: b.x1 * width as f64,
        y1: b.y1 * height as f64,
        x2: b.x2 * width as f64,
        y2: b.y2 * height as f64,
    })
}

/// RGB image with values in [0,1], row-major (row, column, channel).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Image {
        Image { height, width, data: vec![0.0; height * width * Self::CHANNELS] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * Self::CHANNELS + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * Self::CHANNELS + ch] = v;
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * Self::CHANNELS;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Snap every channel to the 8-bit grid. Generated datasets are stored as
    /// 8-bit PNG, so in-memory values must sit on that grid for the
    /// save/load round trip to be the identity.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }
}

/// One image-text sample with its full manipulation annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediaPair {
    pub id: String,
    pub image: Image,
    /// Token ids, length M <= M_max (no padding stored here).
    pub tokens: Vec<usize>,
    /// 0 = pristine pair, 1 = at least one manipulation present.
    pub y_bin: u8,
    /// Multi-hot flags ordered (FS, FA, TS, TA).
    pub y_mul: [u8; 4],
    /// Manipulated image region; all-zero when the image is untouched.
    pub y_box: BBox,
    /// Per-token flags, 1 marks a manipulated token; aligned with `tokens`.
    pub y_tok: Vec<u8>,
    pub split: Split,
}

impl MediaPair {
    pub fn has_manip(&self, t: ManipType) -> bool {
        self.y_mul[t.index()] == 1
    }

    pub fn manip_types(&self) -> Vec<ManipType> {
        ManipType::ALL.iter().copied().filter(|t| self.has_manip(*t)).collect()
    }

    /// Human-readable class key: "pristine", "FS", "FA+TA", ...
    pub fn class_key(&self) -> String {
        let types = self.manip_types();
        if types.is_empty() {
            "pristine".to_string()
        } else {
            types.iter().map(|t| t.tag()).collect::<Vec<_>>().join("+")
        }
    }
}

/// Check every annotation invariant; returns one message per violation.
/// Violations are data for the caller, not errors.
pub fn validate_pair(pair: &MediaPair) -> Vec<String> {
    let mut issues = Vec::new();
    let any_mul = pair.y_mul.iter().any(|&f| f == 1);

    if (pair.y_bin == 1) != any_mul {
        if pair.y_bin == 0 && any_mul {
            issues.push("real pair has manipulation flags set".to_string());
        } else {
            issues.push("fake pair has no manipulation flag".to_string());
        }
    }

    let image_side = pair.has_manip(ManipType::FaceSwap) || pair.has_manip(ManipType::FaceAttribute);
    if image_side && pair.y_box.is_degenerate() {
        let tag = if pair.has_manip(ManipType::FaceSwap) { "FS" } else { "FA" };
        issues.push(format!("{tag} set but bbox degenerate"));
    }
    if !image_side && pair.y_box != BBox::ZERO {
        issues.push("no image manipulation but bbox nonzero".to_string());
    }

    let text_side = pair.has_manip(ManipType::TextSwap) || pair.has_manip(ManipType::TextAttribute);
    let any_tok = pair.y_tok.iter().any(|&t| t == 1);
    if text_side && !any_tok {
        issues.push("text manipulation flagged but no fake token".to_string());
    }
    if !text_side && any_tok {
        if pair.y_bin == 0 {
            issues.push("real pair has fake tokens".to_string());
        } else {
            issues.push("fake tokens present without a text manipulation flag".to_string());
        }
    }

    if pair.has_manip(ManipType::FaceSwap) && pair.has_manip(ManipType::FaceAttribute) {
        issues.push("FS and FA both set".to_string());
    }
    if pair.has_manip(ManipType::TextSwap) && pair.has_manip(ManipType::TextAttribute) {
        issues.push("TS and TA both set".to_string());
    }

    if !pair.y_box.is_ordered() {
        issues.push("bbox corners out of order".to_string());
    }
    if !pair.y_box.in_unit_range() {
        issues.push("bbox outside [0,1]".to_string());
    }

    if pair.y_tok.len() != pair.tokens.len() {
        issues.push(format!(
            "token annotation length {} != token count {}",
            pair.y_tok.len(),
            pair.tokens.len()
        ));
    }

    issues
}

/// Model output for one pair; probabilities, not logits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    /// Probability that the pair is fake.
    pub p_bin: f64,
    /// Per-type probabilities ordered (FS, FA, TS, TA).
    pub p_mul: [f64; 4],
    pub pred_box: BBox,
    /// Per-token fake probabilities, aligned with the input tokens.
    pub p_tok: Vec<f64>,
}
