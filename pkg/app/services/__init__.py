# Domain services: tensors, token sets, encoders, training and evaluation
