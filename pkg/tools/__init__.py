# cbf-liveness tools package
