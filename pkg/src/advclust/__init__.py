"""Black-box adversarial poisoning of clustering algorithms."""
