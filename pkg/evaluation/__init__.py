# evaluation package
