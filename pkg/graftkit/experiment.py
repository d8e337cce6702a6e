"""Desk-scale comparison of a grafted network with supervised baselines (LeNet on MNIST-like pairs)."""
import logging

import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from graftkit.backbones import build_backbone
from graftkit.evaluation import evaluate_top1
from graftkit.graft_trainer import train_graft
from graftkit.model_graph import count_params
from graftkit.paired_data import LabeledDataset

logger = logging.getLogger(__name__)


def train_classifier(chain, samples, use="frame", epochs=5, lr=1e-3, batch_size=256, seed=0, device="cpu"):
    """Supervised cross-entropy training of a whole chain on labeled samples."""
    torch.manual_seed(seed)
    loader = DataLoader(LabeledDataset(samples, use), batch_size=batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(seed))
    chain.to(device)
    optimizer = torch.optim.Adam(chain.parameters(), lr=lr)
    for epoch in range(epochs):
        chain.train()
        running, batches = 0.0, 0
        for inputs, labels in loader:
            optimizer.zero_grad()
            loss = F.cross_entropy(chain(inputs.to(device)), labels.to(device))
            loss.backward()
            optimizer.step()
            running += float(loss.detach())
            batches += 1
        logger.info(f"classifier ({use}) epoch {epoch}: cross-entropy {running / max(batches, 1):.4f}")
    chain.eval()
    return chain


def pretrained_on_modality(pretrained, samples):
    """Error of the intensity network fed the modality directly; None when channel counts differ."""
    if pretrained.input_shape[0] != samples[0].modality.shape[0]:
        return None
    return evaluate_top1(pretrained, samples, use="modality")


def run_grafting_experiment(data, cfg, classifier_epochs=5, classifier_lr=1e-3, classifier_batch=256,
                            pretrained=None, backbone="lenet5"):
    """Pretrain on frames, graft onto the modality, and train a supervised modality network.

    Returns (results DataFrame, grafted model, pretrained chain).
    """
    frame_channels = data.train[0].frame.shape[0]
    modality_channels = data.train[0].modality.shape[0]
    size = data.train[0].frame.shape[-1]

    if pretrained is None:
        pretrained = build_backbone(backbone, in_channels=frame_channels, input_size=size)
        train_classifier(pretrained, data.train, "frame", classifier_epochs, classifier_lr, classifier_batch, cfg.seed)
    pretrained.requires_grad_(False)

    grafted, report = train_graft(pretrained, cfg.split, data, cfg)

    supervised = build_backbone(backbone, in_channels=modality_channels, input_size=size)
    torch.manual_seed(cfg.seed)
    train_classifier(supervised, data.train, "modality", classifier_epochs, classifier_lr, classifier_batch, cfg.seed)

    total = count_params(pretrained).count
    rows = [
        {"network": "pretrained", "input": "frame", "top1_error": evaluate_top1(pretrained, data.test, "frame"),
         "trained_params": total},
        {"network": "grafted", "input": "modality", "top1_error": evaluate_top1(grafted, data.test, "modality"),
         "trained_params": grafted.trainable_param_count()},
        {"network": "supervised", "input": "modality", "top1_error": evaluate_top1(supervised, data.test, "modality"),
         "trained_params": count_params(supervised).count},
    ]
    baseline = pretrained_on_modality(pretrained, data.test)
    if baseline is not None:
        rows.append({"network": "pretrained", "input": "modality", "top1_error": baseline, "trained_params": total})
    results = pd.DataFrame(rows)
    results["seed"] = cfg.seed
    results["graft_wall_clock_s"] = report.wall_clock_s
    logger.info(f"Grafting experiment results:\n{results.to_string(index=False)}")
    return results, grafted, pretrained
