use crate::error::{Error, Result};

/// A multi-channel 1D signal stored channel-major: `data[c * length + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSignal {
    channels: usize,
    length: usize,
    data: Vec<f64>,
}

impl ChannelSignal {
    pub fn new(channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * length {
            return Err(Error::shape(format!(
                "signal data has {} values, expected {channels}x{length}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            length,
            data,
        })
    }

    pub fn zeros(channels: usize, length: usize) -> Self {
        Self {
            channels,
            length,
            data: vec![0.0; channels * length],
        }
    }

    /// Single-channel signal over `values`.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            channels: 1,
            length: values.len(),
            data: values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.length..(c + 1) * self.length]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.length..(c + 1) * self.length]
    }

    pub fn dot(&self, other: &ChannelSignal) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks `other` below `self` as extra channels.
    pub fn concat_channels(&self, other: &ChannelSignal) -> Result<ChannelSignal> {
        if self.length != other.length {
            return Err(Error::shape(format!(
                "cannot concatenate signals of length {} and {}",
                self.length, other.length
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(ChannelSignal {
            channels: self.channels + other.channels,
            length: self.length,
            data,
        })
    }

    /// Splits off the trailing `tail` channels.
    pub fn split_channels(&self, tail: usize) -> (ChannelSignal, ChannelSignal) {
        let head = self.channels - tail;
        let cut = head * self.length;
        (
            ChannelSignal {
                channels: head,
                length: self.length,
                data: self.data[..cut].to_vec(),
            },
            ChannelSignal {
                channels: tail,
                length: self.length,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}
