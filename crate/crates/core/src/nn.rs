//! Convolution layers that own their weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::param::{Param, Parameterized};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        spec.validate().expect("invalid conv spec");
        Conv2d {
            weight: Param::kaiming(spec.weight_shape_2d(), spec.fan_in(2), rng),
            bias: spec.bias.then(|| Param::zeros([spec.out_channels])),
            spec,
        }
    }

    pub fn zeroed(spec: ConvSpec) -> Self {
        Conv2d {
            weight: Param::zeros(spec.weight_shape_2d()),
            bias: spec.bias.then(|| Param::zeros([spec.out_channels])),
            spec,
        }
    }

    pub fn zero_(&mut self) {
        self.weight.fill(0.0);
        if let Some(b) = &mut self.bias {
            b.fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, &self.spec, w, b)
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv3d {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        spec.validate().expect("invalid conv spec");
        Conv3d {
            weight: Param::kaiming(spec.weight_shape_3d(), spec.fan_in(3), rng),
            bias: spec.bias.then(|| Param::zeros([spec.out_channels])),
            spec,
        }
    }

    pub fn zero_(&mut self) {
        self.weight.fill(0.0);
        if let Some(b) = &mut self.bias {
            b.fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv3d(x, &self.spec, w, b)
    }
}

impl Parameterized for Conv3d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}
