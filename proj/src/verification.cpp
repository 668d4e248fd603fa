namespace conjlab {}
