//! Layout-tagged 3-D hyperspectral cubes.
//!
//! A [`Tensor`] is a `height x width x bands` array stored contiguously in one
//! of two layouts:
//!
//! * [`Layout::Bsq`] (band sequential): offset of `(r, c, b)` is `b*H*W + r*W + c`.
//!   Each band is a contiguous row-major plane, which suits channel-wise work
//!   such as demosaicing, interpolation and spatial cropping.
//! * [`Layout::Bip`] (band interleaved by pixel): offset is `(r*W + c)*B + b`.
//!   Each pixel's spectrum is contiguous, which suits per-pixel work and is the
//!   input layout the network expects.
//!
//! All operations return new tensors; inputs are never modified.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Bsq,
    Bip,
}

impl Layout {
    pub fn tag(self) -> u8 {
        match self {
            Layout::Bsq => 0,
            Layout::Bip => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Layout::Bsq),
            1 => Some(Layout::Bip),
            _ => None,
        }
    }

    #[inline]
    pub fn offset(self, height: usize, width: usize, bands: usize, r: usize, c: usize, b: usize) -> usize {
        match self {
            Layout::Bsq => b * height * width + r * width + c,
            Layout::Bip => (r * width + c) * bands + b,
        }
    }
}

/// Element storage. Quantized cubes carry a power-of-two exponent: the real
/// value of element `q` is `q * 2^exponent`.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    I8 { data: Vec<i8>, exponent: i32 },
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::I8 { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn type_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U16(_) => "u16",
            TensorData::I8 { .. } => "i8",
        }
    }
}

/// A single element read through [`Tensor::at`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Element {
    F32(f32),
    U16(u16),
    I8 { value: i8, exponent: i32 },
}

impl Element {
    pub fn to_f64(self) -> f64 {
        match self {
            Element::F32(v) => v as f64,
            Element::U16(v) => v as f64,
            Element::I8 { value, exponent } => value as f64 * (exponent as f64).exp2(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    bands: usize,
    layout: Layout,
    data: TensorData,
}

impl Tensor {
    pub fn new(height: usize, width: usize, bands: usize, layout: Layout, data: TensorData) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(bands))
            .ok_or_else(|| Error::Dimension(format!("{height}x{width}x{bands} overflows")))?;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{bands} tensor needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            layout,
            data,
        })
    }

    pub fn from_f32(height: usize, width: usize, bands: usize, layout: Layout, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, bands, layout, TensorData::F32(data))
    }

    pub fn zeros(height: usize, width: usize, bands: usize, layout: Layout) -> Self {
        Self {
            height,
            width,
            bands,
            layout,
            data: TensorData::F32(vec![0.0; height * width * bands]),
        }
    }

    /// Builds an f32 tensor by evaluating `f(r, c, b)` for every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        layout: Layout,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = vec![0.0; height * width * bands];
        for r in 0..height {
            for c in 0..width {
                for b in 0..bands {
                    data[layout.offset(height, width, bands, r, c, b)] = f(r, c, b);
                }
            }
        }
        Self {
            height,
            width,
            bands,
            layout,
            data: TensorData::F32(data),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::ElementType(format!("expected f32 tensor, got {}", other.type_name()))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::ElementType(format!("expected f32 tensor, got {}", other.type_name()))),
        }
    }

    pub fn expect_layout(&self, step: &'static str, expected: Layout) -> Result<()> {
        if self.layout != expected {
            return Err(Error::Layout {
                step,
                expected,
                actual: self.layout,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn offset(&self, r: usize, c: usize, b: usize) -> usize {
        self.layout.offset(self.height, self.width, self.bands, r, c, b)
    }

    pub fn at(&self, r: usize, c: usize, b: usize) -> Result<Element> {
        if r >= self.height || c >= self.width || b >= self.bands {
            return Err(Error::Index {
                row: r,
                col: c,
                band: b,
                height: self.height,
                width: self.width,
                bands: self.bands,
            });
        }
        let i = self.offset(r, c, b);
        Ok(match &self.data {
            TensorData::F32(v) => Element::F32(v[i]),
            TensorData::U16(v) => Element::U16(v[i]),
            TensorData::I8 { data, exponent } => Element::I8 {
                value: data[i],
                exponent: *exponent,
            },
        })
    }

    /// Unchecked-by-type f32 accessor for hot loops in tests and kernels.
    pub fn get_f32(&self, r: usize, c: usize, b: usize) -> Result<f32> {
        match self.at(r, c, b)? {
            Element::F32(v) => Ok(v),
            _ => Err(Error::ElementType("expected f32 tensor".into())),
        }
    }

    /// Returns the same logical values stored in `target` layout.
    pub fn convert_layout(&self, target: Layout) -> Tensor {
        if target == self.layout {
            return self.clone();
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(self.permute(v, target)),
            TensorData::U16(v) => TensorData::U16(self.permute(v, target)),
            TensorData::I8 { data, exponent } => TensorData::I8 {
                data: self.permute(data, target),
                exponent: *exponent,
            },
        };
        Tensor {
            height: self.height,
            width: self.width,
            bands: self.bands,
            layout: target,
            data,
        }
    }

    fn permute<T: Copy + Default>(&self, src: &[T], target: Layout) -> Vec<T> {
        let (h, w, nb) = (self.height, self.width, self.bands);
        let plane = h * w;
        let mut out = vec![T::default(); src.len()];
        match (self.layout, target) {
            (Layout::Bsq, Layout::Bip) => {
                for b in 0..nb {
                    let band = &src[b * plane..(b + 1) * plane];
                    for (p, &v) in band.iter().enumerate() {
                        out[p * nb + b] = v;
                    }
                }
            }
            (Layout::Bip, Layout::Bsq) => {
                for (p, px) in src.chunks_exact(nb.max(1)).enumerate().take(plane) {
                    for (b, &v) in px.iter().enumerate() {
                        out[b * plane + p] = v;
                    }
                }
            }
            _ => out.copy_from_slice(src),
        }
        out
    }

    /// Spatial window `[top, top+out_h) x [left, left+out_w)` across all bands.
    pub fn crop(&self, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
        let fits = top.checked_add(out_h).is_some_and(|e| e <= self.height)
            && left.checked_add(out_w).is_some_and(|e| e <= self.width);
        if !fits {
            return Err(Error::Dimension(format!(
                "crop window ({top},{left}) {out_h}x{out_w} exceeds {}x{} tensor",
                self.height, self.width
            )));
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(self.window(v, top, left, out_h, out_w)),
            TensorData::U16(v) => TensorData::U16(self.window(v, top, left, out_h, out_w)),
            TensorData::I8 { data, exponent } => TensorData::I8 {
                data: self.window(data, top, left, out_h, out_w),
                exponent: *exponent,
            },
        };
        Ok(Tensor {
            height: out_h,
            width: out_w,
            bands: self.bands,
            layout: self.layout,
            data,
        })
    }

    fn window<T: Copy>(&self, src: &[T], top: usize, left: usize, out_h: usize, out_w: usize) -> Vec<T> {
        let (h, w, nb) = (self.height, self.width, self.bands);
        let mut out = Vec::with_capacity(out_h * out_w * nb);
        match self.layout {
            Layout::Bsq => {
                for b in 0..nb {
                    for r in top..top + out_h {
                        let start = b * h * w + r * w + left;
                        out.extend_from_slice(&src[start..start + out_w]);
                    }
                }
            }
            Layout::Bip => {
                for r in top..top + out_h {
                    let start = (r * w + left) * nb;
                    out.extend_from_slice(&src[start..start + out_w * nb]);
                }
            }
        }
        out
    }

    /// Contiguous plane of band `b` (BSQ only).
    pub fn band_plane(&self, b: usize) -> Result<&[f32]> {
        self.expect_layout("band_plane", Layout::Bsq)?;
        let plane = self.height * self.width;
        if b >= self.bands {
            return Err(Error::Dimension(format!("band {b} out of {}", self.bands)));
        }
        Ok(&self.as_f32()?[b * plane..(b + 1) * plane])
    }

    /// Spectrum of pixel `(r, c)` (BIP only).
    pub fn pixel(&self, r: usize, c: usize) -> Result<&[f32]> {
        self.expect_layout("pixel", Layout::Bip)?;
        let nb = self.bands;
        let start = (r * self.width + c) * nb;
        self.as_f32()?
            .get(start..start + nb)
            .ok_or_else(|| Error::Dimension(format!("pixel ({r},{c}) out of range")))
    }

    /// Bitwise equality including element bit patterns (distinguishes -0.0 and NaN payloads).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if (self.height, self.width, self.bands, self.layout) != (other.height, other.width, other.bands, other.layout) {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_bsq() -> Tensor {
        Tensor::from_f32(2, 2, 2, Layout::Bsq, (0..8).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn bsq_to_bip_small_example() {
        let bip = sample_bsq().convert_layout(Layout::Bip);
        assert_eq!(bip.as_f32().unwrap(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
        assert_eq!(bip.layout(), Layout::Bip);
    }

    #[test]
    fn at_uses_layout_offsets() {
        let bsq = sample_bsq();
        let bip = bsq.convert_layout(Layout::Bip);
        assert_eq!(bsq.at(1, 1, 1).unwrap(), Element::F32(7.0));
        assert_eq!(bip.at(1, 1, 1).unwrap(), Element::F32(7.0));
        assert_eq!(bsq.at(0, 0, 0).unwrap(), Element::F32(bsq.as_f32().unwrap()[0]));
        assert_eq!(bip.at(0, 0, 0).unwrap(), Element::F32(bip.as_f32().unwrap()[0]));
    }

    #[test]
    fn at_out_of_range() {
        let t = sample_bsq();
        assert!(matches!(t.at(2, 0, 0), Err(Error::Index { .. })));
        assert!(matches!(t.at(0, 0, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn same_layout_conversion_is_copy() {
        let t = sample_bsq();
        assert!(t.convert_layout(Layout::Bsq).bitwise_eq(&t));
    }

    #[test]
    fn crop_identity_and_bounds() {
        let t = sample_bsq();
        assert!(t.crop(0, 0, 2, 2).unwrap().bitwise_eq(&t));
        assert!(matches!(t.crop(1, 0, 2, 2), Err(Error::Dimension(_))));
        assert!(matches!(t.crop(0, 1, 1, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn crop_of_cube_sized_like_sensor_output() {
        let t = Tensor::from_fn(216, 409, 3, Layout::Bsq, |r, c, b| (r * 1000 + c) as f32 + b as f32 * 0.25);
        let cropped = t.crop(12, 12, 192, 384).unwrap();
        assert_eq!((cropped.height(), cropped.width()), (192, 384));
        for b in 0..3 {
            assert_eq!(cropped.at(0, 0, b).unwrap(), t.at(12, 12, b).unwrap());
            assert_eq!(cropped.at(191, 383, b).unwrap(), t.at(203, 395, b).unwrap());
        }
    }

    #[test]
    fn u16_and_i8_convert_too() {
        let t = Tensor::new(1, 2, 2, Layout::Bsq, TensorData::U16(vec![1, 2, 3, 4])).unwrap();
        assert_eq!(t.convert_layout(Layout::Bip).into_data(), TensorData::U16(vec![1, 3, 2, 4]));
        let q = Tensor::new(1, 2, 2, Layout::Bip, TensorData::I8 { data: vec![1, -2, 3, -4], exponent: -7 }).unwrap();
        assert_eq!(q.at(0, 1, 1).unwrap().to_f64(), -4.0 / 128.0);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (1usize..=32, 1usize..=32, 1usize..=32, any::<bool>()).prop_flat_map(|(h, w, b, bip)| {
            let layout = if bip { Layout::Bip } else { Layout::Bsq };
            proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), h * w * b)
                .prop_map(move |data| Tensor::from_f32(h, w, b, layout, data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn layout_roundtrip_is_bitwise(t in arb_tensor()) {
            let other = match t.layout() { Layout::Bsq => Layout::Bip, Layout::Bip => Layout::Bsq };
            let there = t.convert_layout(other);
            let back = there.convert_layout(t.layout());
            prop_assert!(back.bitwise_eq(&t));
            for r in 0..t.height() {
                for c in 0..t.width() {
                    for b in 0..t.bands() {
                        let x = t.get_f32(r, c, b).unwrap().to_bits();
                        prop_assert_eq!(x, there.get_f32(r, c, b).unwrap().to_bits());
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn crops_compose(
            t in arb_tensor(),
            a in 0usize..8, b in 0usize..8, c in 0usize..8, d in 0usize..8,
        ) {
            let (h, w) = (t.height(), t.width());
            prop_assume!(a < h && b < w);
            let (h1, w1) = (h - a, w - b);
            prop_assume!(c < h1 && d < w1);
            let (h2, w2) = (h1 - c, w1 - d);
            let two = t.crop(a, b, h1, w1).unwrap().crop(c, d, h2, w2).unwrap();
            let one = t.crop(a + c, b + d, h2, w2).unwrap();
            prop_assert!(two.bitwise_eq(&one));
        }
    }
}
