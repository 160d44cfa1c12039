//! Shared 2D encoder applied to every TPV plane: a small residual conv
//! backbone followed by a top-down feature pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{Plane, TpvTriple};
use crate::tensor::{BoundParams, Conv2d, Graph, GroupNorm, Padding, ParamStore, Tensor, Var};

/// Per-plane boolean switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneFlags {
    pub hw: bool,
    pub wd: bool,
    pub dh: bool,
}

impl PlaneFlags {
    pub const ALL: PlaneFlags = PlaneFlags {
        hw: true,
        wd: true,
        dh: true,
    };

    pub fn get(&self, p: Plane) -> bool {
        match p {
            Plane::Hw => self.hw,
            Plane::Wd => self.wd,
            Plane::Dh => self.dh,
        }
    }

    pub fn only(p: Plane) -> Self {
        Self {
            hw: p == Plane::Hw,
            wd: p == Plane::Wd,
            dh: p == Plane::Dh,
        }
    }

    pub fn any(&self) -> bool {
        self.hw || self.wd || self.dh
    }
}

/// Which planes feed the query sum. Disabled planes contribute zeros.
pub type PlaneMask = PlaneFlags;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel width of each stage.
    pub widths: Vec<usize>,
    /// Stride of each stage's entry conv.
    pub strides: Vec<usize>,
    pub fpn_width: usize,
    /// Stride of the encoded map relative to the input plane.
    pub output_stride: usize,
    pub norm_groups: usize,
    /// Wrap the angle axis in convolutions and upsampling. Not valid for the
    /// DH plane, which has no angle axis.
    pub circular: PlaneFlags,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            fpn_width: 16,
            output_stride: 2,
            norm_groups: 4,
            circular: PlaneFlags {
                hw: true,
                wd: true,
                dh: false,
            },
        }
    }
}

impl BackboneConfig {
    /// Cumulative stride after each stage.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(1, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::config(format!(
                "backbone needs matching non-empty widths {:?} and strides {:?}",
                self.widths, self.strides
            )));
        }
        if self.strides.contains(&0) || self.output_stride == 0 {
            return Err(Error::config("backbone strides must be positive"));
        }
        let cum = self.cumulative_strides();
        if !self.output_stride.is_multiple_of(cum[0]) {
            return Err(Error::config(format!(
                "output stride {} is not a multiple of the first stage stride {}",
                self.output_stride, cum[0]
            )));
        }
        if self.norm_groups == 0
            || self
                .widths
                .iter()
                .chain([&self.fpn_width])
                .any(|w| *w == 0 || w % self.norm_groups != 0)
        {
            return Err(Error::config(format!(
                "norm groups {} must divide every stage width {:?}",
                self.norm_groups, self.widths
            )));
        }
        if self.circular.dh {
            return Err(Error::config("the DH plane has no angle axis to wrap"));
        }
        Ok(())
    }

    /// Checks that a plane of extents `[a, b]` is divisible by every stride.
    pub fn check_extents(&self, plane: Plane, [a, b]: [usize; 2]) -> Result<()> {
        let deepest = *self.cumulative_strides().last().unwrap();
        for s in [deepest, self.output_stride] {
            if a % s != 0 || b % s != 0 {
                return Err(Error::config(format!(
                    "{} plane extents {a}x{b} are not divisible by stride {s}",
                    plane.name()
                )));
            }
        }
        Ok(())
    }

    pub fn padding(&self, plane: Plane) -> Padding {
        if self.circular.get(plane) {
            Padding::for_axis(plane.angle_axis())
        } else {
            Padding::Zeros
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, name, (cin, cout), 3, stride, false, rng),
            norm: GroupNorm::new(store, &format!("{name}_norm"), cout, groups),
        }
    }

    fn forward(&self, g: &Graph, p: &BoundParams, x: Var, pad: Padding) -> Result<Var> {
        let y = self.conv.forward(g, p, x, pad)?;
        self.norm.forward(g, p, y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    entry: ConvNorm,
    conv1: ConvNorm,
    conv2: ConvNorm,
}

/// Backbone + FPN parameters shared by all three planes.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: BackboneConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    output: Conv2d,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        config: &BackboneConfig,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let gn = config.norm_groups;
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for (l, (&w, &s)) in config.widths.iter().zip(&config.strides).enumerate() {
            let name = format!("backbone.stage{l}");
            stages.push(Stage {
                entry: ConvNorm::new(store, &format!("{name}.entry"), cin, w, s, gn, rng),
                conv1: ConvNorm::new(store, &format!("{name}.block.conv1"), w, w, 1, gn, rng),
                conv2: ConvNorm::new(store, &format!("{name}.block.conv2"), w, w, 1, gn, rng),
            });
            cin = w;
        }
        let laterals = config
            .widths
            .iter()
            .enumerate()
            .map(|(l, &w)| Conv2d::new(store, &format!("fpn.lateral{l}"), (w, config.fpn_width), 1, 1, true, rng))
            .collect();
        let out_stride = config.output_stride / config.cumulative_strides()[0];
        let output = Conv2d::new(
            store,
            "fpn.output",
            (config.fpn_width, out_channels),
            3,
            out_stride,
            true,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            in_channels,
            out_channels,
            stages,
            laterals,
            output,
        })
    }

    /// Encodes one plane `[C, A, B]` to `[C', A/os, B/os]`.
    pub fn encode_plane(&self, g: &Graph, p: &BoundParams, x: Var, plane: Plane) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects [{}, A, B], got {shape:?}",
                self.in_channels
            )));
        }
        self.config.check_extents(plane, [shape[1], shape[2]])?;
        let pad = self.config.padding(plane);
        let circ = pad.circular_axis();
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for st in &self.stages {
            h = g.relu(st.entry.forward(g, p, h, pad)?);
            let r = g.relu(st.conv1.forward(g, p, h, pad)?);
            let r = st.conv2.forward(g, p, r, pad)?;
            h = g.relu(g.add(h, r)?);
            feats.push(h);
        }
        let cum = self.config.cumulative_strides();
        let last = feats.len() - 1;
        let mut top = self.laterals[last].forward(g, p, feats[last], Padding::Zeros)?;
        for l in (0..last).rev() {
            let lat = self.laterals[l].forward(g, p, feats[l], Padding::Zeros)?;
            let ratio = cum[l + 1] / cum[l];
            let up = if ratio > 1 { g.resize_bilinear_2d(top, ratio, circ)? } else { top };
            top = g.add(lat, up)?;
        }
        self.output.forward(g, p, top, pad)
    }
}

/// Encodes every enabled plane with the shared encoder and upsamples by `s`.
/// Disabled planes become zero maps of the upsampled shape.
pub fn encode_tpv(
    g: &Graph,
    p: &BoundParams,
    enc: &Encoder,
    planes: &TpvTriple,
    mask: PlaneMask,
    s: usize,
) -> Result<TpvTriple> {
    if !mask.any() {
        return Err(Error::config("plane mask disables every plane"));
    }
    TpvTriple::try_from_fn(|plane| {
        let x = *planes.get(plane);
        if mask.get(plane) {
            let y = enc.encode_plane(g, p, x, plane)?;
            if s == 1 {
                Ok(y)
            } else {
                g.resize_bilinear_2d(y, s, enc.config.padding(plane).circular_axis())
            }
        } else {
            let shape = g.shape(x);
            let os = enc.config.output_stride;
            Ok(g.constant(Tensor::zeros(&[
                enc.out_channels,
                shape[1] / os * s,
                shape[2] / os * s,
            ])))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            widths: vec![4, 8, 8],
            strides: vec![1, 2, 2],
            fpn_width: 4,
            output_stride: 2,
            norm_groups: 2,
            ..Default::default()
        }
    }

    fn build(cfg: &BackboneConfig, cin: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::new(&mut store, cfg, cin, cin, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn output_shape_follows_stride() {
        let (store, enc) = build(&small(), 8);
        let g = Graph::inference();
        let p = store.bind(&g);
        let x = g.constant(Tensor::from_fn(&[8, 48, 36], |i| (i as f64 * 0.37).sin()));
        let y = enc.encode_plane(&g, &p, x, Plane::Hw).unwrap();
        assert_eq!(g.shape(y), vec![8, 24, 18]);
        let bad = g.constant(Tensor::zeros(&[8, 50, 36]));
        assert!(matches!(enc.encode_plane(&g, &p, bad, Plane::Hw), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_bias_field() {
        let (mut store, enc) = build(&small(), 3);
        for p in store.iter_mut() {
            if p.name.ends_with(".weight") {
                p.value = p.value.map(|_| 0.0);
            }
        }
        let bias = store.find("fpn.output.bias").unwrap();
        store.get_mut(bias).value = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = Graph::inference();
        let p = store.bind(&g);
        let x = g.constant(Tensor::from_fn(&[3, 8, 8], |i| i as f64));
        let y = g.value(enc.encode_plane(&g, &p, x, Plane::Dh).unwrap());
        for (ch, want) in [0.5, -1.0, 2.0].into_iter().enumerate() {
            assert!(y.data()[ch * 16..(ch + 1) * 16].iter().all(|&v| v == want));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.circular.dh = true;
        assert!(c.validate().is_err());
        let mut c = small();
        c.norm_groups = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.strides.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn mask_zeroes_disabled_planes() {
        let (store, enc) = build(&small(), 2);
        let g = Graph::inference();
        let p = store.bind(&g);
        let t = TpvTriple {
            hw: g.constant(Tensor::full(&[2, 8, 12], 1.0)),
            wd: g.constant(Tensor::full(&[2, 12, 4], 1.0)),
            dh: g.constant(Tensor::full(&[2, 4, 8], 1.0)),
        };
        let out = encode_tpv(&g, &p, &enc, &t, PlaneFlags::only(Plane::Hw), 2).unwrap();
        assert_eq!(g.shape(out.hw), vec![2, 8, 12]);
        assert_eq!(g.shape(out.wd), vec![2, 12, 4]);
        assert!(g.value(out.wd).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.dh).data().iter().all(|&v| v == 0.0));
        assert!(g.value(out.hw).data().iter().any(|&v| v != 0.0));
        let none = PlaneFlags {
            hw: false,
            wd: false,
            dh: false,
        };
        assert!(encode_tpv(&g, &p, &enc, &t, none, 2).is_err());
    }

    #[test]
    fn encoder_gradients() {
        let cfg = BackboneConfig {
            widths: vec![2, 2],
            strides: vec![1, 2],
            fpn_width: 2,
            output_stride: 2,
            norm_groups: 1,
            ..Default::default()
        };
        let (store, enc) = build(&cfg, 2);
        let mut values: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        values.push(Tensor::from_fn(&[2, 4, 8], |i| ((i * 13) % 7) as f64 * 0.3 - 0.8));
        let np = store.len();
        let f = |g: &Graph, v: &[Var]| -> Result<Var> {
            let bp = BoundParams::from_vars(v[..np].to_vec());
            let y = enc.encode_plane(g, &bp, v[np], Plane::Wd)?;
            let w = g.constant(Tensor::from_fn(&g.shape(y), |i| (i as f64 * 0.7).cos()));
            let z = g.mul(y, w)?;
            Ok(g.sum(z))
        };
        let r = finite_diff_check(
            f,
            &values,
            &GradCheckOptions {
                max_coords_per_input: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
