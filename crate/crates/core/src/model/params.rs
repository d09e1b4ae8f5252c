use std::ops::Range;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    /// No nonlinearity; used to check gradients against hand-derived linear cases.
    Identity,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub(crate) fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub n_hidden: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub activation: Activation,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 128,
            n_hidden: 3,
            embed_dim: 16,
            time_dim: 32,
            activation: Activation::Silu,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.embed_dim == 0 || self.time_dim == 0 {
            return Err(Error::Config(
                "architecture dimensions must be positive".into(),
            ));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dimension must be even, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    /// Attention width; queries, keys and values share the embedding size.
    pub fn attn_dim(&self) -> usize {
        self.embed_dim
    }

    /// Trunk layers (input layer plus hidden layers) that run before the
    /// cross-attention block.
    pub fn layers_before_attention(&self) -> usize {
        1 + self.n_hidden / 2
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, e, a) = (self.data_dim, self.hidden, self.embed_dim, self.attn_dim());
        let input = h * (d + self.time_dim) + h;
        let hidden = self.n_hidden * (h * h + h);
        let head = d * h + d;
        let attn = a * h + 2 * a * e + h * a;
        input + hidden + head + attn
    }

    pub fn layout(&self) -> Layout {
        let (d, h, e, a) = (self.data_dim, self.hidden, self.embed_dim, self.attn_dim());
        let mut b = LayoutBuilder::default();
        b.push("trunk.in.weight", [h, d + self.time_dim], ParamGroup::Trunk);
        b.push("trunk.in.bias", [1, h], ParamGroup::Trunk);
        for i in 0..self.n_hidden {
            b.push(
                &format!("trunk.hidden.{i}.weight"),
                [h, h],
                ParamGroup::Trunk,
            );
            b.push(&format!("trunk.hidden.{i}.bias"), [1, h], ParamGroup::Trunk);
        }
        b.push("attn.query.weight", [a, h], ParamGroup::Conditioning);
        b.push("attn.key.weight", [a, e], ParamGroup::Conditioning);
        b.push("attn.value.weight", [a, e], ParamGroup::Conditioning);
        b.push("attn.out.weight", [h, a], ParamGroup::Conditioning);
        b.push("trunk.head.weight", [d, h], ParamGroup::Trunk);
        b.push("trunk.head.bias", [1, d], ParamGroup::Trunk);
        b.finish()
    }
}

/// Which parameters a fine-tuning step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The cross-attention projections.
    Conditioning,
    /// Everything else.
    Trunk,
    All,
}

impl ParamGroup {
    pub fn contains(self, member: ParamGroup) -> bool {
        self == ParamGroup::All || self == member
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub group: ParamGroup,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Per-coordinate membership mask for `group`.
    pub fn mask(&self, group: ParamGroup) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for t in &self.tensors {
            if group.contains(t.group) {
                mask[t.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

#[derive(Default)]
struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, shape: [usize; 2], group: ParamGroup) {
        let spec = TensorSpec {
            name: name.to_string(),
            shape,
            offset: self.offset,
            group,
        };
        self.offset += spec.len();
        self.tensors.push(spec);
    }

    fn finish(self) -> Layout {
        Layout {
            tensors: self.tensors,
            total: self.offset,
        }
    }
}

/// Flat storage shared by parameters and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    arch: ArchitectureConfig,
    layout: Layout,
    values: Vec<f64>,
}

/// Weights of the conditional noise predictor.
pub type ModelParams = ParamVec;
/// Gradient over [`ModelParams`], same layout.
pub type Gradient = ParamVec;

impl ParamVec {
    pub fn zeros(arch: ArchitectureConfig) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let values = vec![0.0; layout.total()];
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    pub fn from_values(arch: ArchitectureConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(Error::Dimension {
                expected: p.values.len(),
                got: values.len(),
            });
        }
        p.values = values;
        Ok(p)
    }

    /// Fan-in scaled uniform initialization; the attention output projection
    /// starts at zero so the initial model ignores its conditioning.
    pub fn init(arch: ArchitectureConfig, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let specs = p.layout.tensors.clone();
        let mut fan_in = 0;
        for spec in &specs {
            let slice = &mut p.values[spec.range()];
            if spec.name.ends_with(".weight") {
                fan_in = spec.shape[1];
            }
            if spec.name == "attn.out.weight" {
                continue;
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in slice.iter_mut() {
                *v = (2.0 * rng.uniform() - 1.0) * bound;
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &ParamVec) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Config("parameter architectures differ".into()));
        }
        Ok(())
    }

    fn spec(&self, name: &str) -> &TensorSpec {
        self.layout
            .get(name)
            .unwrap_or_else(|| panic!("no tensor named {name}"))
    }

    pub fn view(&self, name: &str) -> ArrayView2<'_, f64> {
        let spec = self.spec(name);
        ArrayView2::from_shape(spec.shape, &self.values[spec.range()]).expect("layout shape")
    }

    pub fn view_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let spec = self.spec(name).clone();
        ArrayViewMut2::from_shape(spec.shape, &mut self.values[spec.range()]).expect("layout shape")
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.values[s.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copy of `self` with every coordinate outside `group` set to zero.
    pub fn select_group(&self, group: ParamGroup) -> ParamVec {
        let mut out = self.clone();
        for spec in &self.layout.tensors {
            if !group.contains(spec.group) {
                out.values[spec.range()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamVec) {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// Values restricted to `group`, in layout order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.layout
            .tensors
            .iter()
            .filter(|s| group.contains(s.group))
            .flat_map(|s| self.values[s.range()].iter().copied())
            .collect()
    }
}

/// Zeroes gradient entries outside `group`.
pub fn select_group(grad: &Gradient, group: ParamGroup) -> Gradient {
    grad.select_group(group)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_closed_form_count() {
        for n_hidden in 0..5 {
            let arch = ArchitectureConfig {
                n_hidden,
                ..Default::default()
            };
            assert_eq!(arch.layout().total(), arch.param_count());
        }
        let arch = ArchitectureConfig::default();
        // 128*34 + 128 + 3*(128*128 + 128) + 2*128 + 2 + 16*128 + 2*16*16 + 128*16
        assert_eq!(arch.param_count(), 4480 + 49536 + 258 + 2048 + 512 + 2048);
    }

    #[test]
    fn groups_partition_parameters() {
        let arch = ArchitectureConfig::default();
        let layout = arch.layout();
        let c = layout.mask(ParamGroup::Conditioning);
        let t = layout.mask(ParamGroup::Trunk);
        assert!(c.iter().zip(&t).all(|(a, b)| a ^ b));
        assert!(layout.mask(ParamGroup::All).iter().all(|&m| m));
    }

    #[test]
    fn select_group_cases() {
        let arch = ArchitectureConfig {
            hidden: 8,
            n_hidden: 1,
            embed_dim: 4,
            time_dim: 4,
            ..Default::default()
        };
        let mut rng = RngStream::new(0, 0);
        let mut g = ParamVec::init(arch, &mut rng).unwrap();
        g.values_mut().iter_mut().for_each(|v| *v += 0.5);
        assert_eq!(select_group(&g, ParamGroup::All), g);
        let cond = select_group(&g, ParamGroup::Conditioning);
        let trunk = select_group(&g, ParamGroup::Trunk);
        for spec in g.layout().tensors() {
            let zeroed = match spec.group {
                ParamGroup::Conditioning => &trunk,
                _ => &cond,
            };
            assert!(zeroed.values()[spec.range()].iter().all(|&v| v == 0.0));
        }
        let mut sum = cond.clone();
        sum.add_assign(&trunk);
        assert_eq!(sum, g);
    }

    #[test]
    fn init_zeroes_attention_output() {
        let mut rng = RngStream::new(5, 0);
        let p = ParamVec::init(ArchitectureConfig::default(), &mut rng).unwrap();
        assert!(p.view("attn.out.weight").iter().all(|&v| v == 0.0));
        assert!(p.view("attn.query.weight").iter().any(|&v| v != 0.0));
        assert!(p.is_finite());
    }

    #[test]
    fn odd_time_dim_rejected() {
        let arch = ArchitectureConfig {
            time_dim: 7,
            ..Default::default()
        };
        assert!(ParamVec::zeros(arch).is_err());
    }
}
