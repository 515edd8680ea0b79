use crate::env::Env;
use crate::error::Result;

/// Common action interface shared by baselines and learned policies.
pub trait Controller: Send {
    fn name(&self) -> String;

    /// Decentralized controllers decide each agent from its own observation
    /// (and messages); timing is then reported per agent.
    fn is_decentralized(&self) -> bool;

    /// Called after every environment reset.
    fn reset(&mut self, _env: &Env) -> Result<()> {
        Ok(())
    }

    /// One on/off decision per house for the current environment state.
    fn act(&mut self, env: &Env) -> Result<Vec<bool>>;
}

impl<C: Controller + ?Sized> Controller for Box<C> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn is_decentralized(&self) -> bool {
        (**self).is_decentralized()
    }

    fn reset(&mut self, env: &Env) -> Result<()> {
        (**self).reset(env)
    }

    fn act(&mut self, env: &Env) -> Result<Vec<bool>> {
        (**self).act(env)
    }
}
