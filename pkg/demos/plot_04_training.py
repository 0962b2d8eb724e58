"""
Training the classifier
=======================

A short run on a reduced desk dataset.  Training stops on the loss
threshold, on early stopping against the validation loss, or at the epoch
limit, and the weights of the best validation epoch are restored.
"""
import numpy as np

from lesionbench import synthgen as sg
from lesionbench.netcore import NetworkModel
from lesionbench.trainer import Hyperparams, evaluate, train

# Stronger lesions on small images keep this demo to about a minute
lesion = sg.LesionSpec(diameter=8, intensity=0.5)
data = sg.build_dataset(sg.desk_config(seed=3, image_shape=(32, 32), perlin_grid=(1, 2),
                                       split_sizes=(600, 200, 200), lesion=lesion))
model = NetworkModel.build((32, 32), blocks=(8, 16), dense_units=32, seed=0)
hp = Hyperparams(optimizer="adam", learning_rate=1e-3, batch_size_train=32, max_epochs=15, patience=4)


def report(epoch, train_loss, val_loss, val_acc):
    print(f"epoch {epoch:2d}  train {train_loss:.4f}  val {val_loss:.4f}  acc {val_acc:.3f}")


model, history = train(model, data, hp, seed=0, on_epoch=report)
print("stopped:", history.stop_reason, "best epoch", history.best_epoch)
hold = data["holdout"]
print("holdout accuracy", evaluate(model, hold.images, hold.labels)[1])
