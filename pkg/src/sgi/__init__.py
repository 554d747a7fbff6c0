"""Self-supervised pretraining (latent self-prediction, goal-conditioned RL,
inverse dynamics) followed by DQN finetuning on a pixel gridworld."""

__version__ = "0.1.0"
