//! In-process backend over a [`SynthWorld`].

use std::sync::Arc;

use crate::logits::LogitVector;
use crate::protocol::session::{Backend, BackendError, BackendInfo, Session, SessionState, TokenId};
use crate::sim::world::{SynthWorld, END_TOKEN};

#[derive(Clone)]
pub struct SimBackend {
    world: Arc<SynthWorld>,
    info: BackendInfo,
}

impl SimBackend {
    pub fn new(world: Arc<SynthWorld>) -> Self {
        let mut info = BackendInfo::from_token_table(world.token_table(), Some(END_TOKEN));
        info.images = Some(world.image_ids());
        Self { world, info }
    }

    pub fn world(&self) -> &Arc<SynthWorld> {
        &self.world
    }
}

impl Backend for SimBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn open_session(
        &self,
        session_id: &str,
        image_id: &str,
        prompt: &[TokenId],
    ) -> Result<Box<dyn Session>, BackendError> {
        let image = self
            .world
            .image_index(image_id)
            .map_err(|_| BackendError::NotFound(image_id.to_owned()))?;
        if let Some(t) = prompt.iter().find(|&&t| t as usize >= self.world.vocab_size()) {
            return Err(BackendError::InvalidRequest(format!("prompt token {t} outside vocabulary")));
        }
        Ok(Box::new(SimSession {
            world: Arc::clone(&self.world),
            image,
            tokens: prompt.to_vec(),
            state: SessionState::new(session_id, image_id, prompt),
        }))
    }
}

/// Grammar position is the number of prompt plus fed tokens.
pub struct SimSession {
    world: Arc<SynthWorld>,
    image: usize,
    tokens: Vec<TokenId>,
    state: SessionState,
}

impl Session for SimSession {
    fn state(&self) -> &SessionState {
        &self.state
    }

    fn step_logits(&mut self) -> Result<LogitVector, BackendError> {
        self.state.last_step = Some(self.state.next_step());
        LogitVector::new(self.world.next_logits(self.image, &self.tokens))
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))
    }

    fn feed(&mut self, token: TokenId) -> Result<(), BackendError> {
        if token as usize >= self.world.vocab_size() {
            return Err(BackendError::InvalidRequest(format!("token {token} outside vocabulary")));
        }
        self.tokens.push(token);
        self.state.fed_tokens.push(token);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::{build_world, WorldConfig};

    #[test]
    fn sessions_are_reproducible() {
        let world = Arc::new(build_world(&WorldConfig::default(), 0).unwrap());
        let backend = SimBackend::new(world);
        let run = || {
            let mut s = backend.open_session("a", "img_4", &[]).unwrap();
            let mut out = Vec::new();
            for t in [1, 2, 12, 3] {
                out.push(s.step_logits().unwrap());
                s.feed(t).unwrap();
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unknown_image_is_not_found() {
        let world = Arc::new(build_world(&WorldConfig::default(), 0).unwrap());
        let backend = SimBackend::new(world);
        assert!(matches!(backend.open_session("a", "missing", &[]), Err(BackendError::NotFound(_))));
    }
}
