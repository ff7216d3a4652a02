"""SGD over k-space subsets."""
