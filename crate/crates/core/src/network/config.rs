use crate::cnn::{DropoutSpec, HeadMode};
use crate::deconv::{DeconvLayerConfig, PoolRegion, StepSize};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub maps: usize,
    pub kernel: usize,
    pub pool: PoolRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrunkSharing {
    /// One conv/deconv trunk feeding every patch head.
    Shared,
    /// A full network per patch.
    Independent,
}

/// What the deconvolutional stack reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeconvInput {
    Conv,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub classes: usize,
    pub conv_maps: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    /// Spatial pool size per conv stage.
    pub conv_pools: Vec<usize>,
    /// Plain conv stages standing in for deconv layers (same kernel, maps and pooling).
    pub replacement_convs: usize,
    pub deconv_layers: usize,
    /// Settings shared by every deconv layer.
    pub deconv: DeconvLayerConfig,
    pub deconv_input: DeconvInput,
    pub patches_m: usize,
    pub patches_n: usize,
    pub head_mode: HeadMode,
    pub dropout: DropoutSpec,
    pub seed: u64,
    pub conv_epochs: usize,
    pub deconv_epochs: usize,
    pub head_epochs: usize,
    pub conv_lr: f64,
    pub head_lr: f64,
    /// Class-balanced target sampling for the supervised stages.
    pub balanced: bool,
    /// Head training draws per image per epoch.
    pub pixels_per_image: usize,
    /// Images used for deconv training (0 = all).
    pub deconv_train_images: usize,
    pub sharing: TrunkSharing,
    /// 0 disables local contrast normalization.
    pub lcn_window: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_height: 64,
            input_width: 64,
            classes: 5,
            conv_maps: vec![16, 32],
            conv_kernels: vec![5, 5],
            conv_pools: vec![2, 2],
            replacement_convs: 0,
            deconv_layers: 3,
            deconv: DeconvLayerConfig::default(),
            deconv_input: DeconvInput::Conv,
            patches_m: 1,
            patches_n: 1,
            head_mode: HeadMode::Softmax,
            dropout: DropoutSpec::default(),
            seed: 0,
            conv_epochs: 5,
            deconv_epochs: 3,
            head_epochs: 10,
            conv_lr: 0.01,
            head_lr: 0.005,
            balanced: true,
            pixels_per_image: 64,
            deconv_train_images: 0,
            sharing: TrunkSharing::Shared,
            lcn_window: 9,
        }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl NetworkConfig {
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs: Vec<ConvSpec> = self
            .conv_maps
            .iter()
            .zip(&self.conv_kernels)
            .zip(&self.conv_pools)
            .map(|((&maps, &kernel), &p)| ConvSpec {
                maps,
                kernel,
                pool: PoolRegion::spatial(p),
            })
            .collect();
        specs.extend((0..self.replacement_convs).map(|_| ConvSpec {
            maps: self.deconv.maps,
            kernel: self.deconv.kernel,
            pool: self.deconv.pool,
        }));
        specs
    }

    pub fn deconv_configs(&self) -> Vec<DeconvLayerConfig> {
        vec![self.deconv.clone(); self.deconv_layers]
    }

    /// Shape of every conv stage output, then of every deconv layer's pooled maps.
    pub fn layer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::new();
        let mut s = [self.input_channels, self.input_height, self.input_width];
        let chain = |s: [usize; 3], maps: usize, k: usize, pool: PoolRegion, what: String| -> Result<[usize; 3]> {
            if k == 0 || s[1] < k || s[2] < k {
                return cfg_err(format!("{what}: kernel {k} does not fit {}x{}", s[1], s[2]));
            }
            pool.pooled_shape(maps, s[1] - k + 1, s[2] - k + 1)
                .map_err(|e| Error::Config(format!("{what}: {e}")))
        };
        let conv_out = {
            for (i, sp) in self.conv_specs().iter().enumerate() {
                s = chain(s, sp.maps, sp.kernel, sp.pool, format!("conv stage {}", i + 1))?;
                shapes.push(s);
            }
            s
        };
        let mut y = match self.deconv_input {
            DeconvInput::Conv => conv_out,
            DeconvInput::Image => [self.input_channels, self.input_height, self.input_width],
        };
        for l in 0..self.deconv_layers {
            y = chain(y, self.deconv.maps, self.deconv.kernel, self.deconv.pool, format!("deconv layer {}", l + 1))?;
            shapes.push(y);
        }
        Ok(shapes)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let last = shapes
            .last()
            .copied()
            .unwrap_or([self.input_channels, self.input_height, self.input_width]);
        Ok(last.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return cfg_err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.head_mode == HeadMode::Sigmoid && self.classes != 2 {
            return cfg_err("sigmoid head requires classes=2");
        }
        if self.conv_maps.len() != self.conv_kernels.len() || self.conv_maps.len() != self.conv_pools.len() {
            return cfg_err("conv_maps, conv_kernels and conv_pools must have equal length");
        }
        if self.conv_maps.iter().chain(&self.conv_pools).any(|&v| v == 0) {
            return cfg_err("conv maps and pools must be positive");
        }
        if self.replacement_convs > 0 && self.deconv_layers > 0 {
            return cfg_err("replacement conv stages and deconv layers are exclusive");
        }
        if self.deconv_input == DeconvInput::Image && self.replacement_convs > 0 {
            return cfg_err("deconv_input=image is meaningless with replacement conv stages");
        }
        if self.patches_m == 0 || self.patches_n == 0 {
            return cfg_err("patch grid must be at least 1x1");
        }
        if self.pixels_per_image == 0 {
            return cfg_err("pixels_per_image must be positive");
        }
        if !(self.conv_lr >= 0.0 && self.head_lr >= 0.0) {
            return cfg_err("learning rates must be nonnegative");
        }
        if self.lcn_window != 0 && (self.lcn_window < 3 || self.lcn_window % 2 == 0) {
            return cfg_err(format!("lcn_window must be 0 or odd >= 3, got {}", self.lcn_window));
        }
        self.dropout.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.deconv.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.layer_shapes()?;
        Ok(())
    }

    /// `Deconv-k` (2 conv + k−2 deconv), or `CNN-k` (2 conv + k−2 replacement conv stages).
    pub fn variant(&self, name: &str) -> Result<NetworkConfig> {
        let base = self.conv_maps.len();
        let parse = |s: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(k) if k >= base => Ok(k - base),
                _ => cfg_err(format!("variant {name}: depth must be at least {base}")),
            }
        };
        let mut v = self.clone();
        if let Some(k) = name.strip_prefix("Deconv-") {
            v.deconv_layers = parse(k)?;
            v.replacement_convs = 0;
        } else if let Some(k) = name.strip_prefix("CNN-") {
            v.replacement_convs = parse(k)?;
            v.deconv_layers = 0;
        } else {
            return cfg_err(format!("unknown variant {name}"));
        }
        v.validate()?;
        Ok(v)
    }

    pub fn variant_name(&self) -> String {
        let depth = self.conv_maps.len() + self.replacement_convs + self.deconv_layers;
        if self.deconv_layers > 0 {
            format!("Deconv-{depth}")
        } else {
            format!("CNN-{depth}")
        }
    }

    /// Every key accepted by [`NetworkConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "input_channels", "input_height", "input_width", "classes", "conv_maps", "conv_kernels",
        "conv_pools", "replacement_convs", "deconv_layers", "deconv_maps", "deconv_kernel",
        "deconv_pool_size", "deconv_pool_depth", "lambda", "shrink", "ista_iterations",
        "ista_iterations_infer", "ista_step", "cg_tolerance", "cg_max_iterations", "unit_norm",
        "deconv_input", "patches_m", "patches_n", "head", "dropout_input", "dropout_hidden",
        "dropout_fc", "seed", "conv_epochs", "deconv_epochs", "head_epochs", "conv_lr", "head_lr",
        "balanced", "pixels_per_image", "deconv_train_images", "trunk", "lcn_window",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Config(format!("malformed value {v:?} for {key}"));
        let uint = || v.parse::<usize>().map_err(|_| bad());
        let float = || v.parse::<f64>().ok().filter(|f| f.is_finite()).ok_or_else(bad);
        let list = || -> Result<Vec<usize>> {
            v.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad())).collect()
        };
        let boolean = || match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "input_channels" => self.input_channels = uint()?,
            "input_height" => self.input_height = uint()?,
            "input_width" => self.input_width = uint()?,
            "classes" => self.classes = uint()?,
            "conv_maps" => self.conv_maps = list()?,
            "conv_kernels" => self.conv_kernels = list()?,
            "conv_pools" => self.conv_pools = list()?,
            "replacement_convs" => self.replacement_convs = uint()?,
            "deconv_layers" => self.deconv_layers = uint()?,
            "deconv_maps" => self.deconv.maps = uint()?,
            "deconv_kernel" => self.deconv.kernel = uint()?,
            "deconv_pool_size" => {
                let s = uint()?;
                self.deconv.pool.height = s;
                self.deconv.pool.width = s;
            }
            "deconv_pool_depth" => self.deconv.pool.depth = uint()?,
            "lambda" => self.deconv.lambda = float()?,
            "shrink" => self.deconv.shrink = float()?,
            "ista_iterations" => self.deconv.ista_iterations = uint()?,
            "ista_iterations_infer" => self.deconv.ista_iterations_infer = uint()?,
            "ista_step" => {
                self.deconv.ista_step = if v == "auto" { StepSize::Auto } else { StepSize::Fixed(float()?) }
            }
            "cg_tolerance" => self.deconv.cg_tolerance = float()?,
            "cg_max_iterations" => self.deconv.cg_max_iterations = uint()?,
            "unit_norm" => self.deconv.unit_norm = boolean()?,
            "deconv_input" => {
                self.deconv_input = match v {
                    "conv" => DeconvInput::Conv,
                    "image" => DeconvInput::Image,
                    _ => return Err(bad()),
                }
            }
            "patches_m" => self.patches_m = uint()?,
            "patches_n" => self.patches_n = uint()?,
            "head" => {
                self.head_mode = match v {
                    "softmax" => HeadMode::Softmax,
                    "sigmoid" => HeadMode::Sigmoid,
                    _ => return Err(bad()),
                }
            }
            "dropout_input" => self.dropout.input = float()?,
            "dropout_hidden" => self.dropout.hidden = float()?,
            "dropout_fc" => self.dropout.fc = float()?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "conv_epochs" => self.conv_epochs = uint()?,
            "deconv_epochs" => self.deconv_epochs = uint()?,
            "head_epochs" => self.head_epochs = uint()?,
            "conv_lr" => self.conv_lr = float()?,
            "head_lr" => self.head_lr = float()?,
            "balanced" => self.balanced = boolean()?,
            "pixels_per_image" => self.pixels_per_image = uint()?,
            "deconv_train_images" => self.deconv_train_images = uint()?,
            "trunk" => {
                self.sharing = match v {
                    "shared" => TrunkSharing::Shared,
                    "independent" => TrunkSharing::Independent,
                    _ => return Err(bad()),
                }
            }
            "lcn_window" => self.lcn_window = uint()?,
            _ => return cfg_err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// All keys with values that [`NetworkConfig::set`] reads back exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let d = &self.deconv;
        vec![
            ("input_channels", self.input_channels.to_string()),
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("classes", self.classes.to_string()),
            ("conv_maps", list(&self.conv_maps)),
            ("conv_kernels", list(&self.conv_kernels)),
            ("conv_pools", list(&self.conv_pools)),
            ("replacement_convs", self.replacement_convs.to_string()),
            ("deconv_layers", self.deconv_layers.to_string()),
            ("deconv_maps", d.maps.to_string()),
            ("deconv_kernel", d.kernel.to_string()),
            ("deconv_pool_size", d.pool.height.to_string()),
            ("deconv_pool_depth", d.pool.depth.to_string()),
            ("lambda", format!("{:?}", d.lambda)),
            ("shrink", format!("{:?}", d.shrink)),
            ("ista_iterations", d.ista_iterations.to_string()),
            ("ista_iterations_infer", d.ista_iterations_infer.to_string()),
            (
                "ista_step",
                match d.ista_step {
                    StepSize::Auto => "auto".into(),
                    StepSize::Fixed(s) => format!("{s:?}"),
                },
            ),
            ("cg_tolerance", format!("{:?}", d.cg_tolerance)),
            ("cg_max_iterations", d.cg_max_iterations.to_string()),
            ("unit_norm", d.unit_norm.to_string()),
            (
                "deconv_input",
                match self.deconv_input {
                    DeconvInput::Conv => "conv".into(),
                    DeconvInput::Image => "image".into(),
                },
            ),
            ("patches_m", self.patches_m.to_string()),
            ("patches_n", self.patches_n.to_string()),
            (
                "head",
                match self.head_mode {
                    HeadMode::Softmax => "softmax".into(),
                    HeadMode::Sigmoid => "sigmoid".into(),
                },
            ),
            ("dropout_input", format!("{:?}", self.dropout.input)),
            ("dropout_hidden", format!("{:?}", self.dropout.hidden)),
            ("dropout_fc", format!("{:?}", self.dropout.fc)),
            ("seed", self.seed.to_string()),
            ("conv_epochs", self.conv_epochs.to_string()),
            ("deconv_epochs", self.deconv_epochs.to_string()),
            ("head_epochs", self.head_epochs.to_string()),
            ("conv_lr", format!("{:?}", self.conv_lr)),
            ("head_lr", format!("{:?}", self.head_lr)),
            ("balanced", self.balanced.to_string()),
            ("pixels_per_image", self.pixels_per_image.to_string()),
            ("deconv_train_images", self.deconv_train_images.to_string()),
            (
                "trunk",
                match self.sharing {
                    TrunkSharing::Shared => "shared".into(),
                    TrunkSharing::Independent => "independent".into(),
                },
            ),
            ("lcn_window", self.lcn_window.to_string()),
        ]
    }
}
