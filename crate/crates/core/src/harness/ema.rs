use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug)]
pub struct EmaShadow {
    pub decay: f32,
    shadow: Vec<(String, Tensor)>,
}

impl EmaShadow {
    pub fn new(live: &ParamStore, decay: f32) -> Self {
        let shadow = live.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        EmaShadow { decay, shadow }
    }

    /// Restores a shadow from saved tensors.
    pub fn from_tensors(decay: f32, shadow: Vec<(String, Tensor)>) -> Self {
        EmaShadow { decay, shadow }
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        if live.len() != self.shadow.len() {
            return Err(Error::shape("ema_update", format!("{} live tensors, {} shadow", live.len(), self.shadow.len())));
        }
        let (a, b) = (self.decay, 1.0 - self.decay);
        for ((_, s), (_, l)) in self.shadow.iter_mut().zip(live.named()) {
            if s.shape() != l.shape() {
                return Err(Error::shape("ema_update", format!("shadow {:?} live {:?}", s.shape(), l.shape())));
            }
            for (x, &y) in s.data_mut().iter_mut().zip(l.data()) {
                *x = a * *x + b * y;
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.shadow
    }

    /// Copies the shadow weights into `store`.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        store.load_values(self.shadow.clone())
    }
}
