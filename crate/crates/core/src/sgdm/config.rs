use crate::error::{invalid, Result};

/// Network sizes. One configuration serves the body model and the face
/// inpainting model; the latter carries `channels + 1` extra input channels
/// (mask and masked latent).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SgdmConfig {
    /// Side of the square input, in pixels.
    pub image_size: usize,
    /// Latent channels `C`.
    pub channels: usize,
    /// Extra input channels concatenated after the latent.
    pub extra_channels: usize,
    /// Channels of the condition map.
    pub cond_channels: usize,
    /// Feature width of the outer level.
    pub base_width: usize,
    /// Feature width of the inner levels and of every attention block (`d`).
    pub width: usize,
    pub temb_dim: usize,
    pub hint_width: usize,
    pub groups: usize,
}

impl SgdmConfig {
    pub fn body() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            extra_channels: 0,
            cond_channels: 1,
            base_width: 32,
            width: 64,
            temb_dim: 64,
            hint_width: 16,
            groups: 8,
        }
    }

    pub fn face() -> Self {
        Self {
            image_size: 16,
            extra_channels: 4,
            ..Self::body()
        }
    }

    /// Smallest configuration exercising every block, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            extra_channels: 0,
            cond_channels: 1,
            base_width: 4,
            width: 8,
            temb_dim: 8,
            hint_width: 4,
            groups: 2,
        }
    }

    pub fn with_face_inputs(mut self) -> Self {
        self.extra_channels = self.channels + 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let op = "SgdmConfig";
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(invalid(op, "image_size must be a positive multiple of 8"));
        }
        if self.channels == 0 || self.cond_channels == 0 || self.temb_dim == 0 || self.hint_width == 0 {
            return Err(invalid(op, "channel counts must be positive"));
        }
        if self.extra_channels != 0 && self.extra_channels != self.channels + 1 {
            return Err(invalid(op, "extra_channels must be 0 or channels + 1"));
        }
        if self.groups == 0 || [self.stem_width(), self.base_width, self.width].iter().any(|w| w % self.groups != 0) {
            return Err(invalid(op, "widths must be divisible by groups"));
        }
        if self.temb_dim % 2 != 0 {
            return Err(invalid(op, "temb_dim must be even"));
        }
        Ok(())
    }

    /// Width of the full-resolution stem and output stage.
    pub fn stem_width(&self) -> usize {
        self.base_width / 2
    }

    /// Channels entering the stem convolution.
    pub fn input_channels(&self) -> usize {
        self.channels + self.extra_channels
    }

    /// Side of the appearance encoder's final grid.
    pub fn token_grid(&self) -> usize {
        self.image_size / 8
    }

    /// Number of appearance tokens `L`.
    pub fn tokens(&self) -> usize {
        self.token_grid() * self.token_grid()
    }

    /// `(channels, side)` of the decoder levels, innermost first, matching
    /// the order of control features.
    pub fn decoder_levels(&self) -> [(usize, usize); 4] {
        let s = self.image_size;
        [(self.width, s / 8), (self.width, s / 4), (self.base_width, s / 2), (self.stem_width(), s)]
    }
}

impl Default for SgdmConfig {
    fn default() -> Self {
        Self::body()
    }
}
