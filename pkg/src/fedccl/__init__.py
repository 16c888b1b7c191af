"""Federated-learning simulator for dual-clustered feature contrast (FedCCL) and its
adversarially trained variant (FedCCL+)."""

from .adversarial import AttackConfig, adversarial_total_loss, evaluate_under_attack, pgd_perturb
from .contrast import Ablation, ContrastContext, global_contrast_loss, local_contrast_loss, total_loss
from .datagen import ClientDataset, Dataset, ScenarioSpec, build_scenario, dirichlet_partition, load_idx
from .federation import FedConfig, RoundMetrics, client_local_update, run_training, server_aggregate_params
from .finch import ClusterPartition, adjacency_partition, cluster_means, finch_cluster, first_neighbors
from .numerics import ModelParams, TrainConfig, cosine_sim, forward, loss_and_grads, sgd_step
from .signals import avg_global_signal, avg_local_signal, global_signals, local_signals, pool_signals

__version__ = "0.1.0"
